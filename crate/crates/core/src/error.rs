use thiserror::Error;

/// Errors raised across the routing library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("matrix is rank deficient (column {column} norm {norm:e})")]
    RankDeficient { column: usize, norm: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out of domain: {0}")]
    OutOfDomain(String),

    #[error("root finder did not converge after {iterations} iterations")]
    ConvergenceFailure { iterations: usize },

    #[error("theorem hypothesis violated: separation gap {gap} is not positive")]
    AssumptionViolated { gap: f64 },

    #[error("overlap calibration failed: target {target}, reached {reached}")]
    CalibrationFailure { target: f64, reached: f64 },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
