//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("point behind camera (depth {0})")]
    BehindCamera(f64),

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward pass requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("non-finite loss while perturbing parameter `{0}`")]
    NonFiniteLoss(String),

    #[error("degenerate attention: {0}")]
    DegenerateAttention(String),

    #[error("insufficient views: need at least 2, got {0}")]
    InsufficientViews(usize),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate window: {0}")]
    DegenerateWindow(String),

    #[error("insufficient scores: {0}")]
    InsufficientScores(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Dataset { path: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dataset(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            message: message.into(),
        }
    }
}
