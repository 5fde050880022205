//! Online knee-onset detection for one battery.
//!
//! The first `K` cycles build the warm-up series and fix the upper control
//! limit (mean + 1.5σ of the cycle-level profile, first entry excluded).
//! Every later cycle `s` is synchronized, appended, and cycle `c = s − f` is
//! compared against the limit. An exceedance makes `c` a candidate.
//!
//! A candidate is resolved once its neighbourhood is observable, on receipt
//! of cycle `c + 2f`. With an exclusion zone of `f / 2` cycles, the newest
//! entries of the profile can only point backwards, so the direction of
//! `ĩ_c` and of the `f` entries after it is not known before then. At
//! resolution, using the freshest profile, the candidate becomes the knee
//! onset when:
//!
//! 1. `p̃_c` is still above the limit,
//! 2. the profile index switches direction at `c`:
//!    `ĩ_{c−1} < c−1 ∧ ĩ_c ≥ c`, or `ĩ_c < c ∧ ĩ_{c+1} ≥ c+1`,
//! 3. every `ĩ_e` for `e = c+1 ..= c+f` points at cycle `c − 1` or later.
//!
//! Candidates that fail are dropped; nothing is blacklisted.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cycle::{CycleError, DischargeCycle, ReferenceCycle};
use crate::dtw::{synchronize, DtwError};
use crate::matrix_profile::{CycleAnchor, CycleProfile, ProfileError, StreamingProfile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("warm-up needs exactly {expected} cycles, got {got}")]
    WarmupCount { expected: usize, got: usize },
    #[error("expected cycle {expected}, got {got}")]
    NotContiguous { expected: u32, got: u32 },
    #[error("knee onset already reported; detector is finished")]
    DetectorFinished,
    #[error("control limit needs at least 2 cycle-level entries, got {0}")]
    TooFewEntries(usize),
    #[error(transparent)]
    Dtw(#[from] DtwError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Cycle(#[from] CycleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// `K`: warm-up cycles used for the control limit.
    pub warmup_cycles: usize,
    /// `f`: cycles per query; also the detection delay.
    pub cycle_lag: usize,
    pub ucl_sigma_multiplier: f64,
    #[serde(default)]
    pub anchor: CycleAnchor,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            warmup_cycles: 110,
            cycle_lag: 10,
            ucl_sigma_multiplier: 1.5,
            anchor: CycleAnchor::Start,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.cycle_lag < 1 {
            return Err(DetectorError::Config("cycle_lag must be >= 1".into()));
        }
        if self.warmup_cycles <= 2 * self.cycle_lag {
            return Err(DetectorError::Config(format!(
                "warmup_cycles ({}) must exceed 2 x cycle_lag ({})",
                self.warmup_cycles, self.cycle_lag
            )));
        }
        if !(self.ucl_sigma_multiplier.is_finite() && self.ucl_sigma_multiplier >= 0.0) {
            return Err(DetectorError::Config(
                "ucl_sigma_multiplier must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "cycle", rename_all = "snake_case")]
pub enum Verdict {
    Warming,
    NoChange,
    Candidate(u32),
    KneeOnset(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WarmingUp,
    Monitoring,
    /// Oldest unresolved candidate and the cycles left until it resolves.
    Confirming { candidate: u32, remaining: u32 },
    Finished,
}

/// `mean + multiplier·σ` over entries `2..=len` (population σ).
pub fn compute_ucl(profile: &CycleProfile, multiplier: f64) -> Result<f64, DetectorError> {
    let values = &profile.values;
    if values.len() < 2 {
        return Err(DetectorError::TooFewEntries(values.len()));
    }
    let tail = &values[1..];
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(mean + multiplier * var.sqrt())
}

/// What the detector looked at when a cycle arrived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub received: u32,
    /// Cycle whose profile entry became available (`received − f`).
    pub evaluated: u32,
    pub profile_value: f64,
    /// Neighbour of `evaluated`, in cycle numbers.
    pub profile_index: u32,
}

#[derive(Debug, Clone)]
pub struct KneeDetector {
    cfg: DetectorConfig,
    reference: Option<ReferenceCycle>,
    first_cycle: u32,
    received: usize,
    engine: Option<StreamingProfile>,
    ucl: Option<f64>,
    pending: VecDeque<usize>,
    knee: Option<u32>,
    last_evaluation: Option<Evaluation>,
}

impl KneeDetector {
    pub fn new(cfg: DetectorConfig) -> Result<Self, DetectorError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            reference: None,
            first_cycle: 1,
            received: 0,
            engine: None,
            ucl: None,
            pending: VecDeque::new(),
            knee: None,
            last_evaluation: None,
        })
    }

    /// Builds a detector already in the monitoring phase from exactly `K`
    /// cycles. The first one becomes the reference.
    pub fn warm_up(cycles: &[DischargeCycle], cfg: DetectorConfig) -> Result<Self, DetectorError> {
        if cycles.len() != cfg.warmup_cycles {
            return Err(DetectorError::WarmupCount {
                expected: cfg.warmup_cycles,
                got: cycles.len(),
            });
        }
        let mut det = Self::new(cfg)?;
        for c in cycles {
            det.step(c)?;
        }
        Ok(det)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn ucl(&self) -> Option<f64> {
        self.ucl
    }

    pub fn knee_onset(&self) -> Option<u32> {
        self.knee
    }

    pub fn reference(&self) -> Option<&ReferenceCycle> {
        self.reference.as_ref()
    }

    pub fn cycles_received(&self) -> usize {
        self.received
    }

    pub fn last_evaluation(&self) -> Option<Evaluation> {
        self.last_evaluation
    }

    pub fn phase(&self) -> Phase {
        if self.knee.is_some() {
            Phase::Finished
        } else if self.ucl.is_none() {
            Phase::WarmingUp
        } else if let Some(&c) = self.pending.front() {
            Phase::Confirming {
                candidate: self.cycle_number(c),
                remaining: (c + 2 * self.cfg.cycle_lag - self.received) as u32,
            }
        } else {
            Phase::Monitoring
        }
    }

    /// Current cycle-level profile, once warm-up is complete.
    pub fn cycle_profile(&mut self) -> Result<Option<CycleProfile>, DetectorError> {
        let d = self.reference.as_ref().map(|r| r.len());
        match (self.engine.as_mut(), d, self.ucl) {
            (Some(engine), Some(d), Some(_)) => {
                Ok(Some(engine.cycle_profile(d, self.cfg.cycle_lag, self.cfg.anchor)?))
            }
            _ => Ok(None),
        }
    }

    fn cycle_number(&self, position: usize) -> u32 {
        self.first_cycle + position as u32 - 1
    }

    pub fn step(&mut self, cycle: &DischargeCycle) -> Result<Verdict, DetectorError> {
        if self.knee.is_some() {
            return Err(DetectorError::DetectorFinished);
        }
        if self.received == 0 {
            self.first_cycle = cycle.cycle_number();
            self.reference = Some(ReferenceCycle::new(cycle.clone())?);
        } else {
            let expected = self.cycle_number(self.received) + 1;
            if cycle.cycle_number() != expected {
                return Err(DetectorError::NotContiguous {
                    expected,
                    got: cycle.cycle_number(),
                });
            }
        }
        let reference = self.reference.as_ref().expect("reference set on first cycle");
        let d = reference.len();
        let f = self.cfg.cycle_lag;
        let sync = synchronize(reference, cycle)?;
        let engine = match self.engine.as_mut() {
            Some(e) => e,
            None => self.engine.insert(StreamingProfile::new(d * f)?),
        };
        engine.extend(&sync.warped_indices);
        self.received += 1;
        let s = self.received;

        if s < self.cfg.warmup_cycles {
            return Ok(Verdict::Warming);
        }
        let profile = engine.cycle_profile(d, f, self.cfg.anchor)?;
        let Some(ucl) = self.ucl else {
            self.ucl = Some(compute_ucl(&profile, self.cfg.ucl_sigma_multiplier)?);
            return Ok(Verdict::Warming);
        };

        while let Some(&c) = self.pending.front() {
            if c + 2 * f > s {
                break;
            }
            self.pending.pop_front();
            if confirms(&profile, ucl, c, f) {
                let knee = self.cycle_number(c);
                self.knee = Some(knee);
                self.pending.clear();
                self.record(&profile, s, f);
                return Ok(Verdict::KneeOnset(knee));
            }
        }

        let c = s - f;
        self.record(&profile, s, f);
        let value = profile.value(c).expect("entry s - f exists once s > K");
        if value > ucl {
            self.pending.push_back(c);
            Ok(Verdict::Candidate(self.cycle_number(c)))
        } else {
            Ok(Verdict::NoChange)
        }
    }

    fn record(&mut self, profile: &CycleProfile, s: usize, f: usize) {
        let c = s - f;
        self.last_evaluation = Some(Evaluation {
            received: self.cycle_number(s),
            evaluated: self.cycle_number(c),
            profile_value: profile.values[c - 1],
            profile_index: self.cycle_number(profile.indices[c - 1]),
        });
    }
}

/// Resolution test for candidate `c` (positions, 1-based) against the
/// freshest cycle-level profile.
fn confirms(profile: &CycleProfile, ucl: f64, c: usize, f: usize) -> bool {
    let idx = |k: usize| profile.index(k);
    let Some(value) = profile.value(c) else {
        return false;
    };
    if value <= ucl {
        return false;
    }
    let (Some(here), Some(next)) = (idx(c), idx(c + 1)) else {
        return false;
    };
    let from_past_at_c = c >= 2 && idx(c - 1).is_some_and(|p| p < c - 1) && here >= c;
    let from_past_after_c = here < c && next >= c + 1;
    if !(from_past_at_c || from_past_after_c) {
        return false;
    }
    (c + 1..=c + f).all(|e| idx(e).is_some_and(|i| i + 1 >= c))
}
