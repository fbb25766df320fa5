use std::io;

use thiserror::Error;

/// Everything that can go wrong inside the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch (expected {expected}, found {found})")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("checkpoint is missing array `{0}`")]
    MissingArray(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("{0} job(s) failed: {1}")]
    Jobs(usize, String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by arithmetic blowing up rather than by bad
    /// inputs or files.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::GradCheck(_) => true,
            Error::Jobs(_, msg) => msg.contains("non-finite"),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
