//! Online knee-onset detection for lithium-ion cells and category-matched
//! state-of-health estimation.
//!
//! The pipeline runs in three layers:
//!
//! - [`dtw`] aligns every raw discharge-voltage cycle to a reference cycle and
//!   turns it into a fixed-length warped time-index trajectory.
//! - [`matrix_profile`] and [`detector`] watch the concatenated trajectories
//!   for a regime change, using a control limit learned from early-life cycles
//!   and the direction of each cycle's nearest neighbour.
//! - [`fleet`] and [`soh`] turn detected knee onsets into battery categories
//!   and train one recurrent SOH regressor per category on post-knee data.
//!
//! [`synth`] produces labelled synthetic batteries, and [`io`] / [`cli`] wire
//! everything to CSV input and JSON reports.

pub mod cli;
pub mod cycle;
pub mod detector;
pub mod dtw;
pub mod error;
pub mod fleet;
pub mod io;
pub mod matrix_profile;
pub mod soh;
pub mod synth;

pub use cycle::{
    DischargeCycle, DischargeSeries, ReferenceCycle, Sample, SohSeries, SynchronizedCycle,
    VoltageWindow,
};
pub use detector::{DetectorConfig, KneeDetector, Verdict};
pub use error::{Error, Result};
