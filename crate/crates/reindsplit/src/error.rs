//! Crate-wide error type.

use thiserror::Error;

use crate::proto::{ProtoError, TransportError};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or out-of-range configuration, including unknown keys.
    #[error("config error: {0}")]
    Config(String),

    /// Bad dataset inputs (length mismatches, empty inputs, missing classes).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor or layer dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Split-execution calls arrived in an order the protocol forbids,
    /// e.g. a backward pass without a matching cached forward.
    #[error("protocol order violation: {0}")]
    ProtocolOrder(String),

    /// Wire codec rejection (bad magic, CRC mismatch, truncation, ...).
    #[error("wire protocol error: {0}")]
    Proto(#[from] ProtoError),

    /// Transport failure; round-fatal with device attribution added upstream.
    #[error("transport error: {0}")]
    Transport(#[from] TransportError),

    /// Anything that aborts a run after configuration was accepted.
    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: config errors 2, runtime 3, I/O 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 4,
            _ => 3,
        }
    }
}
