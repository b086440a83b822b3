use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FgcmError {
    #[error(transparent)]
    Engine(#[from] fgcm_engine::EngineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("model is untrained: {0}")]
    Untrained(String),
    #[error("{failed} of {total} files failed:\n{report}")]
    Batch {
        failed: usize,
        total: usize,
        report: String,
    },
}

pub type Result<T, E = FgcmError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> FgcmError {
    let path = path.into();
    move |source| FgcmError::Io { path, source }
}
