use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or invariant-violating input, located by file and 1-based row.
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range for pool of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("infeasible marginals: {0}")]
    InfeasibleMarginals(String),

    #[error("instance too large for exhaustive enumeration: {subsets} subsets exceeds guard {guard}")]
    TooLarge { subsets: u128, guard: u128 },

    /// A solver certificate check failed; this is a bug, not a user error.
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}
