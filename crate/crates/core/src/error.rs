use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("Cholesky factorization failed at pivot {pivot} (value {value:e}); increase the jitter")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("patient {patient}: {reason}")]
    Optimization { patient: String, reason: String },

    #[error("parameter file version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },

    #[error("corrupt parameter file: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
