use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TsgmError>;

#[derive(Debug, Error)]
pub enum TsgmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("planning error: {0}")]
    Planning(String),

    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl TsgmError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        TsgmError::InvalidInput(msg.into())
    }

    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        TsgmError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TsgmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        TsgmError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
