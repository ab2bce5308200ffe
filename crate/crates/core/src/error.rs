use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dense path refused: dimension {size} exceeds the dense cap {cap}")]
    DenseCapExceeded { size: usize, cap: usize },

    #[error("matrix is not numerically positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("bidiagonalization produced a non-finite value at iteration {iteration}")]
    NonFiniteIteration { iteration: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    /// Whether the error stems from invalid input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::Domain(_)
                | Error::InvalidArgument(_)
                | Error::DenseCapExceeded { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
