//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// A binary or text input did not parse; `offset` is the byte position
    /// at which decoding failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Sample generation exhausted its retry budget.
    #[error("generation failed (seed {seed:#018x}): {msg}")]
    Generation { seed: u64, msg: String },

    /// Manifest and on-disk data disagree.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 3 for format errors, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. } => 3,
            _ => 2,
        }
    }
}
