//! Error type shared across the workspace.

use thiserror::Error;

/// Unified error for all fallible operations in this crate.
#[derive(Debug, Error)]
pub enum TeresaError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input data (bad JSON line, missing field, wrong record shape).
    #[error("schema error in {path} line {line}: {msg}")]
    Schema {
        path: String,
        line: usize,
        msg: String,
    },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape mismatch inside an op.
    #[error("shape error in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// Numeric failure (non-finite loss, divergent iteration, gradient blowup).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller passed a value that violates an operation's contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A target token cannot be produced by the copy mechanism.
    #[error("target token not copyable from context or query: {token}")]
    UncopyableTarget { token: String },
}

pub type Result<T> = std::result::Result<T, TeresaError>;
