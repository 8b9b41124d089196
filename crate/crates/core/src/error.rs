use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point or set outside its box: {0}")]
    OutOfBounds(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("integer overflow: {0}")]
    Overflow(String),

    #[error("input too large: {0}")]
    TooLarge(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("seed vertex is bad: {0}")]
    SeedViolation(String),

    #[error("internal consistency violated: {0}")]
    InternalConsistency(String),

    #[error("lemma hypothesis unmet: {0}")]
    Hypothesis(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
