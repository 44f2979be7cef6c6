use thiserror::Error;

pub type Result<T> = std::result::Result<T, HoloError>;

#[derive(Debug, Error)]
pub enum HoloError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range for table of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in stage `{stage}`")]
    NonFinite { stage: &'static str },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid target: {0}")]
    Target(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl HoloError {
    pub fn config(msg: impl Into<String>) -> Self {
        HoloError::Config(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        HoloError::Dimension(msg.into())
    }
}
