use std::io;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad grid, mismatched channels, bad CLI flags).
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or truncated container files.
    #[error("format error: {0}")]
    Format(String),
    /// Tensor shape mismatch between producers and consumers.
    #[error("shape error: {0}")]
    Shape(String),
    /// A verification pass (gradient check, determinism check) failed.
    #[error("verification failure: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("header json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code convention: 0 ok, 2 config error, 3 verification failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Verification(_) => 3,
            _ => 1,
        }
    }
}
