use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the grading library.
#[derive(Debug, Error)]
pub enum Error {
    /// The input document is structurally malformed (missing keys, bad field shapes).
    #[error("format error: {0}")]
    Format(String),

    /// Cross-references inside a document do not resolve (e.g. dangling image id).
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A lookup against the category set or prompt bank failed.
    #[error("unknown class: {0}")]
    UnknownClass(String),

    /// Tensor shapes or resolutions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values where finite math is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
