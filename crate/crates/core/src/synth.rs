//! Synthetic batteries with a planted knee.
//!
//! SOH fades linearly until the knee cycle and then picks up a quadratic
//! term. Each discharge curve is a fixed base shape sampled over
//! `base_cycle_length` time steps until the knee; afterwards it contracts to
//! `base_cycle_length · (SOH / SOH_knee)^time_scale_exponent`, so degraded
//! cycles are shorter. Before the knee only measurement noise changes the
//! curve. From the knee on, the curve is also warped in time by
//! `u + a·sin(πu)` with `a` proportional to `1 − SOH`, which is the trajectory
//! regime change the detector is meant to find.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cycle::{CycleError, DischargeCycle, SohSeries};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("need at least 3 cycles to label a knee, got {0}")]
    TooShort(usize),
    #[error("SOH never falls below {threshold}")]
    NeverReached { threshold: f64 },
    #[error(transparent)]
    Cycle(#[from] CycleError),
}

/// Largest warp amplitude that keeps `u + a·sin(πu)` monotone.
const MAX_WARP: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Ah
    pub nominal_capacity: f64,
    pub stage1_fade_per_cycle: f64,
    pub knee_cycle: u32,
    pub post_knee_acceleration: f64,
    pub voltage_start: f64,
    pub voltage_end: f64,
    /// Samples in a fresh (SOH = 1) cycle.
    pub base_cycle_length: usize,
    /// Voltage noise, V.
    pub noise_sigma: f64,
    /// Additive noise on the reported SOH.
    pub capacity_noise_sigma: f64,
    /// Warp amplitude per unit of lost SOH once past the knee.
    pub distortion_gain: f64,
    pub time_scale_exponent: f64,
    pub eol_threshold: f64,
    pub max_cycles: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            nominal_capacity: 1.1,
            stage1_fade_per_cycle: 1.5e-4,
            knee_cycle: 300,
            post_knee_acceleration: 8e-6,
            voltage_start: 3.3,
            voltage_end: 2.0,
            base_cycle_length: 32,
            noise_sigma: 0.003,
            capacity_noise_sigma: 0.0,
            distortion_gain: 1.5,
            time_scale_exponent: 1.0,
            eol_threshold: 0.8,
            max_cycles: 3000,
            seed: 0,
        }
    }
}

/// The two lifetime categories the synthetic fleets are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthCategory {
    ShortRange,
    LongRange,
}

impl SynthSpec {
    /// Early knee, fast post-knee fade; EOL typically around cycle 400–500.
    pub fn short_range(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f0e_11a5);
        Self {
            knee_cycle: rng.gen_range(230..=300),
            stage1_fade_per_cycle: 1.8e-4 * rng.gen_range(0.9..1.1),
            post_knee_acceleration: 8e-6 * rng.gen_range(0.8..1.25),
            distortion_gain: 1.5,
            time_scale_exponent: 1.0,
            seed,
            ..Self::default()
        }
    }

    /// Late knee, slow post-knee fade; EOL typically around cycle 750–850.
    pub fn long_range(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10c6_7a9e);
        Self {
            knee_cycle: rng.gen_range(450..=540),
            stage1_fade_per_cycle: 1.0e-4 * rng.gen_range(0.9..1.1),
            post_knee_acceleration: 2.5e-6 * rng.gen_range(0.8..1.25),
            distortion_gain: -1.5,
            time_scale_exponent: 0.5,
            seed,
            ..Self::default()
        }
    }

    pub fn for_category(category: SynthCategory, seed: u64) -> Self {
        match category {
            SynthCategory::ShortRange => Self::short_range(seed),
            SynthCategory::LongRange => Self::long_range(seed),
        }
    }

    /// Noise only: no knee within `cycles` and a negligible fade.
    pub fn stationary(seed: u64, cycles: u32) -> Self {
        Self {
            stage1_fade_per_cycle: 1e-9,
            knee_cycle: cycles + 1,
            post_knee_acceleration: 0.0,
            max_cycles: cycles,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: &str| Err(SynthError::SpecInvalid(msg.to_string()));
        if self.knee_cycle < 1 {
            return bad("knee_cycle must be >= 1");
        }
        if !(self.stage1_fade_per_cycle > 0.0) {
            return bad("stage1_fade_per_cycle must be > 0");
        }
        if !(self.post_knee_acceleration >= 0.0) {
            return bad("post_knee_acceleration must be >= 0");
        }
        if !(self.voltage_start > self.voltage_end) {
            return bad("voltage_start must exceed voltage_end");
        }
        if self.base_cycle_length < 2 {
            return bad("base_cycle_length must be >= 2");
        }
        if !(self.noise_sigma >= 0.0 && self.capacity_noise_sigma >= 0.0) {
            return bad("noise levels must be >= 0");
        }
        if !(self.nominal_capacity > 0.0) {
            return bad("nominal_capacity must be > 0");
        }
        if !(self.eol_threshold > 0.0 && self.eol_threshold < 1.0) {
            return bad("eol_threshold must be in (0, 1)");
        }
        if !(self.time_scale_exponent > 0.0 && self.distortion_gain.is_finite()) {
            return bad("time_scale_exponent must be > 0 and distortion_gain finite");
        }
        if self.max_cycles < 3 {
            return bad("max_cycles must be >= 3");
        }
        Ok(())
    }

    /// Noise-free SOH at cycle `c`.
    pub fn true_soh(&self, c: u32) -> f64 {
        let linear = 1.0 - self.stage1_fade_per_cycle * (c as f64 - 1.0);
        if c >= self.knee_cycle {
            let t = (c - self.knee_cycle + 1) as f64;
            linear - self.post_knee_acceleration * t * t
        } else {
            linear
        }
    }

    fn warp_amplitude(&self, c: u32, soh: f64) -> f64 {
        if c < self.knee_cycle {
            0.0
        } else {
            (self.distortion_gain * (1.0 - soh)).clamp(-MAX_WARP, MAX_WARP)
        }
    }
}

/// Normalized discharge shape on `u ∈ [0, 1]`: a quick initial sag, a gently
/// sloping plateau, then the steep end-of-discharge drop.
fn base_shape(u: f64, v_start: f64, v_end: f64) -> f64 {
    let sag = 0.1 * (1.0 - (-u / 0.05).exp()) / (1.0 - (-20.0f64).exp());
    let drop = sag + 0.2 * u + 1.0 * u.powi(8);
    v_start - drop / 1.3 * (v_start - v_end)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBattery {
    pub cycles: Vec<DischargeCycle>,
    pub soh: SohSeries,
    pub knee_cycle: u32,
    pub eol_cycle: Option<u32>,
}

/// Generates cycles up to and including the EOL cycle, or `max_cycles`.
pub fn generate_battery(spec: &SynthSpec) -> Result<SyntheticBattery, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let v_noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| SynthError::SpecInvalid(e.to_string()))?;
    let q_noise = Normal::new(0.0, spec.capacity_noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| SynthError::SpecInvalid(e.to_string()))?;

    let mut cycles = Vec::new();
    let mut soh = Vec::new();
    let mut eol_cycle = None;
    let q_knee = spec.true_soh(spec.knee_cycle);
    for c in 1..=spec.max_cycles {
        let q = spec.true_soh(c);
        if q <= 0.05 {
            return Err(SynthError::SpecInvalid(format!(
                "SOH collapses to {q} at cycle {c} before reaching EOL"
            )));
        }
        let span = if c >= spec.knee_cycle {
            spec.base_cycle_length as f64 * (q / q_knee).powf(spec.time_scale_exponent)
        } else {
            spec.base_cycle_length as f64
        };
        let samples = ((span + 1e-3).floor() as usize).max(2);
        let a = spec.warp_amplitude(c, q);
        let voltages: Vec<f64> = (0..samples)
            .map(|h| {
                let u = (h as f64 / (span - 1.0)).min(1.0);
                let warped = u + a * (std::f64::consts::PI * u).sin();
                let noise = if spec.noise_sigma > 0.0 {
                    v_noise.sample(&mut rng)
                } else {
                    0.0
                };
                base_shape(warped, spec.voltage_start, spec.voltage_end) + noise
            })
            .collect();
        cycles.push(DischargeCycle::from_voltages(c, &voltages)?);

        let measured = if spec.capacity_noise_sigma > 0.0 {
            q + q_noise.sample(&mut rng)
        } else {
            q
        };
        soh.push(measured);
        if q < spec.eol_threshold {
            eol_cycle = Some(c);
            break;
        }
    }
    Ok(SyntheticBattery {
        cycles,
        soh: SohSeries::new(soh, spec.nominal_capacity)?,
        knee_cycle: spec.knee_cycle,
        eol_cycle,
    })
}

/// Smallest cycle `V` whose SOH drop reaches `alpha` while the drop into the
/// previous cycle stayed below it. Drops are magnitudes `Q_{c-1} − Q_c`.
pub fn label_knee(soh: &SohSeries, alpha: f64) -> Result<Option<usize>, SynthError> {
    let q = soh.values();
    if q.len() < 3 {
        return Err(SynthError::TooShort(q.len()));
    }
    // q[v] is cycle v + 1
    Ok((2..q.len())
        .find(|&v| q[v - 2] - q[v - 1] < alpha && q[v - 1] - q[v] >= alpha)
        .map(|v| v + 1))
}

/// First cycle whose SOH is below `threshold`.
pub fn label_eol(soh: &SohSeries, threshold: f64) -> Result<usize, SynthError> {
    soh.values()
        .iter()
        .position(|&q| q < threshold)
        .map(|i| i + 1)
        .ok_or(SynthError::NeverReached { threshold })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fade_has_no_knee() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            post_knee_acceleration: 0.0,
            max_cycles: 400,
            ..SynthSpec::default()
        };
        let b = generate_battery(&spec).unwrap();
        let q = b.soh.values();
        for w in q.windows(3) {
            let d1 = w[0] - w[1];
            let d2 = w[1] - w[2];
            assert!((d1 - d2).abs() < 1e-12);
        }
        assert_eq!(label_knee(&b.soh, spec.stage1_fade_per_cycle * 1.01).unwrap(), None);
    }

    #[test]
    fn knee_recovered_by_labeler() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            ..SynthSpec::default()
        };
        let b = generate_battery(&spec).unwrap();
        let alpha = spec.stage1_fade_per_cycle + 0.5 * spec.post_knee_acceleration;
        let v = label_knee(&b.soh, alpha).unwrap().unwrap();
        assert!(v.abs_diff(300) <= 1, "labelled {v}");
        assert_eq!(
            label_eol(&b.soh, spec.eol_threshold).unwrap() as u32,
            b.eol_cycle.unwrap()
        );
        assert_eq!(b.cycles.len() as u32, b.eol_cycle.unwrap());
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::short_range(17);
        let a = generate_battery(&spec).unwrap();
        let b = generate_battery(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_battery(&SynthSpec { seed: 18, ..spec }).unwrap();
        assert_ne!(a.cycles[5], c.cycles[5]);
    }

    #[test]
    fn soh_non_increasing_and_cycles_shrink() {
        for spec in [SynthSpec::short_range(1), SynthSpec::long_range(2)] {
            let b = generate_battery(&SynthSpec { noise_sigma: 0.0, ..spec }).unwrap();
            assert!(b.soh.values().windows(2).all(|w| w[1] <= w[0]));
            assert!(b.cycles.windows(2).all(|w| w[1].len() <= w[0].len()));
            assert!(b.cycles.last().unwrap().len() < b.cycles[0].len());
        }
    }

    #[test]
    fn categories_separate_on_eol() {
        for seed in 0..5 {
            let s = generate_battery(&SynthSpec::short_range(seed)).unwrap();
            let l = generate_battery(&SynthSpec::long_range(seed)).unwrap();
            let (se, le) = (s.eol_cycle.unwrap(), l.eol_cycle.unwrap());
            assert!(se < 650 && le > 650, "short {se}, long {le}");
            assert!(s.knee_cycle < se && l.knee_cycle < le);
        }
    }

    #[test]
    fn stationary_battery_runs_to_cap() {
        let b = generate_battery(&SynthSpec::stationary(3, 250)).unwrap();
        assert_eq!(b.cycles.len(), 250);
        assert_eq!(b.eol_cycle, None);
        assert!(b.cycles.iter().all(|c| c.len() == 32));
    }

    #[test]
    fn labeler_examples() {
        // drops .001 .001 .003 .004 -> knee at the cycle of the .003 drop
        let q = [1.0, 0.999, 0.998, 0.995, 0.991];
        let s = SohSeries::new(q.to_vec(), 1.1).unwrap();
        assert_eq!(label_knee(&s, 0.002).unwrap(), Some(4));
        let flat = SohSeries::new(vec![0.9; 10], 1.1).unwrap();
        assert_eq!(label_knee(&flat, 1e-6).unwrap(), None);
        assert!(matches!(
            label_knee(&SohSeries::new(vec![1.0, 0.9], 1.1).unwrap(), 0.1),
            Err(SynthError::TooShort(2))
        ));
    }

    #[test]
    fn eol_examples() {
        let s = SohSeries::new(vec![1.0, 0.9, 0.79], 1.1).unwrap();
        assert_eq!(label_eol(&s, 0.8).unwrap(), 3);
        let s = SohSeries::new(vec![1.0, 0.9], 1.1).unwrap();
        assert!(matches!(label_eol(&s, 0.8), Err(SynthError::NeverReached { .. })));
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            SynthSpec { knee_cycle: 0, ..SynthSpec::default() },
            SynthSpec { stage1_fade_per_cycle: 0.0, ..SynthSpec::default() },
            SynthSpec { voltage_end: 3.5, ..SynthSpec::default() },
        ];
        for spec in bad {
            assert!(matches!(generate_battery(&spec), Err(SynthError::SpecInvalid(_))));
        }
    }
}
