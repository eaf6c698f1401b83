use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum ClimsError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matcher error: {0}")]
    Matcher(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ClimsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClimsError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ClimsError::Validation(_) | ClimsError::Shape(_) | ClimsError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, ClimsError>;

pub(crate) fn validation(msg: impl Into<String>) -> ClimsError {
    ClimsError::Validation(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> ClimsError {
    ClimsError::Shape(msg.into())
}
