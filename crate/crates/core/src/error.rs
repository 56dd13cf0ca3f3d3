//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes (both shapes named in the message).
    #[error("dimension error: {0}")]
    Dim(String),
    /// Input outside an operation's domain (empty axis, log of non-positive, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Out-of-range index (labels, face indices, ...).
    #[error("index error: {0}")]
    Index(String),
    /// An internal consistency contract was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Checkpoint corruption or incompatibility.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Training diverged (NaN loss).
    #[error("training aborted: {0}")]
    Diverged(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }

    /// Exit code class for the CLI: 2 for validation problems, 1 otherwise.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dim(_)
                | Error::Domain(_)
                | Error::Index(_)
                | Error::Contract(_)
                | Error::Parse { .. }
                | Error::Config(_)
                | Error::Checkpoint(_)
        )
    }
}
