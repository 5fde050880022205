//! Domain types shared by every stage of the pipeline.
//!
//! Cycle numbers and sample positions are 1-based everywhere in the public
//! API. Conversions to 0-based slice offsets stay inside the modules that
//! need them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CycleError {
    #[error("cycle {cycle_number} has no samples")]
    EmptyCycle { cycle_number: u32 },
    #[error("cycle {cycle_number}: time step {time_step} at sample {position} does not continue a strictly increasing sequence starting at 1")]
    NonMonotoneTime {
        cycle_number: u32,
        position: usize,
        time_step: u32,
    },
    #[error("cycle {cycle_number}: voltage {voltage} at sample {position} is outside [{min}, {max}] V")]
    VoltageOutOfRange {
        cycle_number: u32,
        position: usize,
        voltage: f64,
        min: f64,
        max: f64,
    },
    #[error("cycle numbers start at 1")]
    ZeroCycleNumber,
    #[error("reference cycle needs at least 2 samples, got {0}")]
    ReferenceTooShort(usize),
    #[error("synchronized cycle {cycle_number} has length {got}, series expects {expected}")]
    CycleLengthMismatch {
        cycle_number: u32,
        expected: usize,
        got: usize,
    },
    #[error("SOH {value} at cycle {cycle} is outside (0, 1.2]")]
    SohOutOfRange { cycle: usize, value: f64 },
    #[error("nominal capacity must be positive, got {0}")]
    BadNominalCapacity(f64),
}

/// Plausible voltage range for a single sample. Anything outside it is
/// treated as an ingestion error (usually a unit mix-up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageWindow {
    pub min: f64,
    pub max: f64,
}

impl Default for VoltageWindow {
    fn default() -> Self {
        Self { min: 1.5, max: 4.5 }
    }
}

impl VoltageWindow {
    pub fn contains(&self, v: f64) -> bool {
        v.is_finite() && v >= self.min && v <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time_step: u32,
    pub voltage: f64,
}

/// One raw discharge cycle: voltage sampled at increasing time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DischargeCycle {
    cycle_number: u32,
    samples: Vec<Sample>,
}

impl DischargeCycle {
    /// Validates raw `(time_step, voltage)` pairs against the default window.
    pub fn new(cycle_number: u32, raw: &[(u32, f64)]) -> Result<Self, CycleError> {
        validate_cycle(cycle_number, raw, &VoltageWindow::default())
    }

    /// Builds a cycle from voltages sampled at time steps `1..=len`.
    pub fn from_voltages(cycle_number: u32, voltages: &[f64]) -> Result<Self, CycleError> {
        let raw: Vec<(u32, f64)> = voltages
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as u32 + 1, v))
            .collect();
        Self::new(cycle_number, &raw)
    }

    pub fn cycle_number(&self) -> u32 {
        self.cycle_number
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn voltages(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.voltage).collect()
    }

    pub fn with_cycle_number(mut self, cycle_number: u32) -> Self {
        self.cycle_number = cycle_number;
        self
    }
}

/// Checks the cycle invariants: non-empty, time steps strictly increasing
/// from 1, voltages inside `window`.
pub fn validate_cycle(
    cycle_number: u32,
    raw: &[(u32, f64)],
    window: &VoltageWindow,
) -> Result<DischargeCycle, CycleError> {
    if cycle_number == 0 {
        return Err(CycleError::ZeroCycleNumber);
    }
    if raw.is_empty() {
        return Err(CycleError::EmptyCycle { cycle_number });
    }
    let mut prev = 0u32;
    let mut samples = Vec::with_capacity(raw.len());
    for (i, &(time_step, voltage)) in raw.iter().enumerate() {
        let position = i + 1;
        let ok = if i == 0 { time_step == 1 } else { time_step > prev };
        if !ok {
            return Err(CycleError::NonMonotoneTime {
                cycle_number,
                position,
                time_step,
            });
        }
        if !window.contains(voltage) {
            return Err(CycleError::VoltageOutOfRange {
                cycle_number,
                position,
                voltage,
                min: window.min,
                max: window.max,
            });
        }
        prev = time_step;
        samples.push(Sample { time_step, voltage });
    }
    Ok(DischargeCycle {
        cycle_number,
        samples,
    })
}

/// The cycle every other cycle of a battery is warped against. Its length
/// `d` fixes the length of every synchronized cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCycle(DischargeCycle);

impl ReferenceCycle {
    pub fn new(cycle: DischargeCycle) -> Result<Self, CycleError> {
        if cycle.len() < 2 {
            return Err(CycleError::ReferenceTooShort(cycle.len()));
        }
        Ok(Self(cycle))
    }

    /// Total time steps `d`.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cycle(&self) -> &DischargeCycle {
        &self.0
    }
}

/// Warped time-index trajectory of one cycle: entry `l` (1-based) is the
/// cycle-side sample position matched to reference position `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynchronizedCycle {
    pub cycle_number: u32,
    pub warped_indices: Vec<f64>,
}

impl SynchronizedCycle {
    pub fn len(&self) -> usize {
        self.warped_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.warped_indices.is_empty()
    }
}

/// `K` synchronized cycles of length `d` laid end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DischargeSeries {
    values: Vec<f64>,
    cycle_length: usize,
    cycle_numbers: Vec<u32>,
}

impl DischargeSeries {
    pub fn new(cycle_length: usize) -> Self {
        Self {
            values: Vec::new(),
            cycle_length,
            cycle_numbers: Vec::new(),
        }
    }

    pub fn push(&mut self, cycle: &SynchronizedCycle) -> Result<(), CycleError> {
        if cycle.len() != self.cycle_length {
            return Err(CycleError::CycleLengthMismatch {
                cycle_number: cycle.cycle_number,
                expected: self.cycle_length,
                got: cycle.len(),
            });
        }
        self.values.extend_from_slice(&cycle.warped_indices);
        self.cycle_numbers.push(cycle.cycle_number);
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `n = d × K`
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cycle_length(&self) -> usize {
        self.cycle_length
    }

    pub fn cycle_count(&self) -> usize {
        self.cycle_numbers.len()
    }

    pub fn cycle_numbers(&self) -> &[u32] {
        &self.cycle_numbers
    }

    /// Samples of the `c`-th appended cycle (1-based).
    pub fn segment(&self, c: usize) -> Option<&[f64]> {
        if c == 0 || c > self.cycle_count() {
            return None;
        }
        let d = self.cycle_length;
        Some(&self.values[(c - 1) * d..c * d])
    }
}

/// Upper bound on a single SOH value; leaves room for measurement noise above
/// nominal capacity.
pub const SOH_MAX: f64 = 1.2;

/// Per-cycle state of health, `values[c - 1]` belonging to cycle `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SohSeries {
    values: Vec<f64>,
    nominal_capacity: f64,
}

impl SohSeries {
    pub fn new(values: Vec<f64>, nominal_capacity: f64) -> Result<Self, CycleError> {
        if !(nominal_capacity.is_finite() && nominal_capacity > 0.0) {
            return Err(CycleError::BadNominalCapacity(nominal_capacity));
        }
        if let Some((i, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > 0.0 && v <= SOH_MAX))
        {
            return Err(CycleError::SohOutOfRange { cycle: i + 1, value });
        }
        Ok(Self {
            values,
            nominal_capacity,
        })
    }

    /// SOH from measured capacities in ampere-hours.
    pub fn from_capacities(capacities: &[f64], nominal_capacity: f64) -> Result<Self, CycleError> {
        if !(nominal_capacity.is_finite() && nominal_capacity > 0.0) {
            return Err(CycleError::BadNominalCapacity(nominal_capacity));
        }
        Self::new(
            capacities.iter().map(|c| c / nominal_capacity).collect(),
            nominal_capacity,
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nominal_capacity(&self) -> f64 {
        self.nominal_capacity
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// SOH at cycle `c` (1-based).
    pub fn get(&self, c: usize) -> Option<f64> {
        c.checked_sub(1).and_then(|i| self.values.get(i)).copied()
    }
}
