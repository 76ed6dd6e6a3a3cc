use thiserror::Error;

#[derive(Debug, Error)]
pub enum CogsError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range for codebook of size {size}")]
    TokenOutOfRange { index: usize, size: usize },

    #[error("empty saliency mask")]
    EmptyMask,

    #[error("empty edge map")]
    EmptyEdges,

    #[error("matrix is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CogsError> = std::result::Result<T, E>;

macro_rules! bail_config {
    ($($arg:tt)*) => {
        return Err($crate::error::CogsError::Config(format!($($arg)*)))
    };
}
pub(crate) use bail_config;
