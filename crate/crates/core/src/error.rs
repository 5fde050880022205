use thiserror::Error;

use crate::cycle::CycleError;
use crate::detector::DetectorError;
use crate::dtw::DtwError;
use crate::fleet::{Category, FleetError};
use crate::io::IoError;
use crate::matrix_profile::ProfileError;
use crate::soh::SohError;
use crate::synth::SynthError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Cycle(#[from] CycleError),
    #[error(transparent)]
    Dtw(#[from] DtwError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Soh(#[from] SohError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("no SOH model for category {0}")]
    NoModelForCategory(Category),
    #[error("battery {0} has no capacity data")]
    MissingSoh(String),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// Process exit code: 3 for file-system failures, 2 for everything the
    /// input or configuration got wrong.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(e) if e.is_file_error() => 3,
            _ => 2,
        }
    }
}
