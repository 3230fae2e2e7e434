use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Error, Debug)]
pub enum EvError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate event stream: {0}")]
    DegenerateStream(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl EvError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        EvError::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EvError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, EvError>;
