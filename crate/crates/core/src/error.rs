use std::path::PathBuf;

/// Errors produced anywhere in the restoration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration key `{key}`; valid keys are: {}", valid.join(", "))]
    UnknownConfigKey { key: String, valid: Vec<String> },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input size {height}x{width} is not a multiple of {multiple}; pad or crop the image to a multiple of {multiple}")]
    InputSize {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("teacher weights for `{name}` could not be loaded from {}: {reason}", dir.display())]
    TeacherLoad {
        name: String,
        dir: PathBuf,
        reason: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownConfigKey { .. } | Error::InputSize { .. } => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
