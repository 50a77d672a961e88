use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A batch drawn from the wrong measure was handed to an estimator.
    #[error("wrong measure: {0}")]
    WrongMeasure(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("did not converge after {iterations} iterations (last marginal residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("drift evaluation failed on path {path}, step {step}: {message}")]
    Drift {
        path: usize,
        step: usize,
        message: String,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
