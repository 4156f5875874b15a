use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("target not invertible at layer {layer}, dimension {dim}: {reason}")]
    NotInvertible {
        layer: usize,
        dim: usize,
        reason: String,
    },

    #[error("bisection did not reach tolerance at layer {layer}, dimension {dim} after {iterations} iterations (bracket width {width:e})")]
    ToleranceNotReached {
        layer: usize,
        dim: usize,
        iterations: usize,
        width: f64,
    },

    #[error("sampling aborted: {rejected} of {attempted} draws rejected as non-invertible")]
    SamplingAborted { rejected: usize, attempted: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("cholesky factorization failed even with ridge {ridge:e}; consider reducing the dimension")]
    Cholesky { ridge: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
