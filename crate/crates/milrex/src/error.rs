//! Error type shared across the crate.
//!
//! Every failure carries a category that maps onto a process exit code:
//! data-shaped problems (bad files, bad ids, bad inputs) exit with 1,
//! configuration and usage problems exit with 2.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad vocab size, mismatched relation counts, …
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent data: bad file contents, out-of-range ids, …
    #[error("data error: {0}")]
    Data(String),

    /// An operation was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// A single input (sequence, bag) violated an operation precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for data problems, 2 for usage/config.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Input(_) | Error::Io { .. } => 1,
            Error::Config(_) | Error::Usage(_) | Error::Shape { .. } => 2,
        }
    }
}
