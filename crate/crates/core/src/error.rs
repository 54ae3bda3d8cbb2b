use std::path::PathBuf;

use thiserror::Error;

use crate::data::StyleTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape error: {0}")]
    InputShape(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty query: text has no tokens")]
    EmptyQuery,
    #[error("insufficient data: {points} points for k = {k}")]
    InsufficientData { points: usize, k: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("style transform not supported for `{0}` queries")]
    UnsupportedTransform(StyleTag),
    #[error("degenerate fusion: mean of query embeddings has zero norm")]
    DegenerateFusion,
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("failed to decode gallery items: {0:?}")]
    ItemDecode(Vec<String>),
    #[error("format error: {0}")]
    Format(String),
    #[error("serialization error: {0}")]
    Serialization(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<bincode::Error> for Error {
    fn from(e: bincode::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
