use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SciError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask values must be 0 or 1, found {0} at flat index {1}")]
    NonBinaryMask(f64, usize),

    #[error("explicit operator too large: {rows}x{cols} exceeds the oracle size guard")]
    OperatorTooLarge { rows: usize, cols: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed tensor file {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SciError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SciError::Io { path: path.into(), source }
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        SciError::ShapeMismatch { expected: expected.to_vec(), got: got.to_vec() }
    }
}

pub type Result<T> = std::result::Result<T, SciError>;
