use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("no unique stationary distribution: {0}")]
    NoStationaryDistribution(String),

    #[error("invalid step-size schedule: {0}")]
    InvalidSchedule(String),

    #[error("step index must be at least 1")]
    ZeroStepIndex,

    #[error("feature covariance is rank deficient (smallest singular value {0:e})")]
    RankDeficientBasis(f64),

    #[error("infinite asymptotic covariance: max Re(eigenvalue) of GA + I/2 is {0}")]
    InfiniteCovariance(f64),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("not enough samples: {0}")]
    InsufficientSamples(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("ODE integration failed: {0}")]
    Integration(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
