//! Error taxonomy shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is structurally invalid (odd kernel, divisibility, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input outside an operation's mathematical domain (log of nonpositive, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values or other numeric contract violations at runtime.
    #[error("numeric fault: {0}")]
    Numeric(String),

    /// API misuse: a precondition the caller controls was violated.
    #[error("usage error: {0}")]
    Usage(String),

    /// Dataset / checkpoint files are malformed or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
