use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{op}: dimension mismatch on {axis}: {detail}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        detail: String,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("batchnorm2d: batch too small for train-mode statistics ({count} values per channel, need at least 2)")]
    BatchTooSmall { count: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, axis: &'static str, detail: impl Into<String>) -> EngineError {
    EngineError::Shape {
        op,
        axis,
        detail: detail.into(),
    }
}
