use thiserror::Error;

/// Errors produced by every layer of the library.
#[derive(Debug, Error)]
pub enum GlError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("unlabeled component containing node {node} has no labeled node")]
    UnsolvableComponent { node: usize },

    #[error("conjugate gradient did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("single class: {0}")]
    SingleClass(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pruning removed a whole class; largest feasible separation is {largest_feasible}")]
    EmptyPrune { largest_feasible: f64 },
}

pub type Result<T> = std::result::Result<T, GlError>;

pub(crate) fn invalid(msg: impl Into<String>) -> GlError {
    GlError::InvalidArgument(msg.into())
}
