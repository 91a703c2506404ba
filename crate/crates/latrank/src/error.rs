//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input data, with file/line context where available.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Data-level invariant violation (duplicate ids, rank gaps, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// Configuration rejected at validation time.
    #[error("invalid config: {0}")]
    Config(String),

    /// Tensor shape disagreement.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A forward/backward pass produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
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
}
