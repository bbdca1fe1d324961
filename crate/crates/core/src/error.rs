use std::path::PathBuf;

/// Errors produced by the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing pyramid stage {0}")]
    MissingStage(usize),
    #[error("token sets out of time order: {0}")]
    Ordering(String),
    #[error("invalid role layout: {0}")]
    RoleLayout(String),
    #[error("timestep {got} does not follow previous timestep {prev}")]
    NonMonotonicTime { prev: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("inconsistent visibility mask: {0}")]
    Mask(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("stream format error at {path}: {reason}")]
    StreamFormat { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
