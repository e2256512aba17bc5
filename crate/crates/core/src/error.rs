//! Error type shared by the data pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a documented precondition or invariant.
    #[error("validation error: {0}")]
    Validation(String),
    /// A file is not a well-formed `.mvol` (bad magic, version, dtype).
    #[error("format error: {0}")]
    Format(String),
    /// A file is structurally valid but its payload is damaged or truncated.
    #[error("corrupt data: {0}")]
    Corrupt(String),
    /// Requested structures cannot be realized inside the phantom shape.
    #[error("generation error: {0}")]
    Generation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
