//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("empty loss: no unmasked positions")]
    EmptyLoss,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("visibility capacity exceeded: {got} images, maximum {max}")]
    Capacity { got: usize, max: usize },
    #[error("missing image data for image id {0}")]
    MissingImage(usize),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("sample of length {len} exceeds maximum context {max}")]
    Oversize { len: usize, max: usize },
    #[error("context length {len} exceeds maximum {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("unknown tensor name(s) in checkpoint: {0}")]
    UnknownTensor(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("gradcheck evaluation error: {0}")]
    Eval(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
