use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("misaligned parameter sets: {0}")]
    MisalignedSets(String),

    #[error("invalid parameter set: {0}")]
    InvalidParameterSet(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("invalid probability {0}: must lie in (0, 1]")]
    InvalidProbability(f64),

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite gradient in tensor '{0}'")]
    NonFiniteGradient(String),

    #[error("full-merge optimizer requires the base model")]
    MissingBaseModel,

    #[error("merging optimizer requires the reference delta")]
    MissingReferenceDelta,

    #[error("response index {index} out of range for {count} responses")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("invalid DPO beta {0}: must be positive and finite")]
    InvalidBeta(f64),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Usage/config failures map to exit code 2, everything else to 1.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidConfig(_))
    }
}
