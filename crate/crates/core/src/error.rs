//! Crate-wide error type.
//!
//! Three coarse classes, matching how callers react to them:
//! - [`Error::Config`] — invalid request (bad shape, bad hyperparameter,
//!   inconsistent options). The caller made a mistake.
//! - [`Error::Domain`] — structurally valid input outside the mathematical
//!   domain of an operation (empty batch, non-finite values, label out of
//!   range).
//! - [`Error::Io`] / [`Error::Json`] / [`Error::Parse`] — artifact plumbing:
//!   filesystem, serialization, or text-format failures.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or arguments (shape mismatch, bad option combo).
    #[error("config error: {0}")]
    Config(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Text-format (CSV) failure with 1-based line number.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for filesystem failures. Malformed file *content* (bad JSON,
    /// bad CSV, bad config lines) is input validation, not IO.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
