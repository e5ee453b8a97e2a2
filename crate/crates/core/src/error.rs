use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity showed up in a loss, activation or gradient.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("unsupported {kind} version {found}")]
    Version { kind: &'static str, found: String },

    #[error("truncated {kind} file")]
    Truncated { kind: &'static str },

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("digest mismatch for {}: expected {expected}, found {found}", path.display())]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
