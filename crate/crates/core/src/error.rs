use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GcmaeError>;

#[derive(Debug, Error)]
pub enum GcmaeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mask ratio {0} outside [0, 1)")]
    RatioOutOfRange(f64),

    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sample id {id} out of range for bank of {size} rows")]
    IdOutOfRange { id: usize, size: usize },

    #[error("duplicate id {0} within one batch")]
    DuplicateId(usize),

    #[error("cannot draw {requested} negatives from {available} eligible rows")]
    TooManyNegatives { requested: usize, available: usize },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("class {0} absent from labeled subsample")]
    ClassAbsent(usize),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GcmaeError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        GcmaeError::DimensionMismatch(msg.into())
    }
}
