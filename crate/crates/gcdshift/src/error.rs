//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad shapes, out-of-range hyperparameters,
    /// unknown keys, unknown methods).
    #[error("config error: {0}")]
    Config(String),

    /// Violated operation precondition (empty positive set, non-unit
    /// inputs, malformed target distributions, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// On-disk tensor container problems. Each variant is distinct so
    /// callers can tell a corrupt header from a short read.
    #[error("bad magic: expected \"GCDT\"")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u8),
    #[error("unsupported dtype code {0}")]
    BadDtype(u8),
    #[error("truncated blob: wanted {wanted} bytes, got {got}")]
    Truncated { wanted: u64, got: u64 },
    #[error("dimension overflow in blob header")]
    DimOverflow,
    #[error("inconsistent manifest: {0}")]
    InconsistentManifest(String),

    /// Training diverged; carries a diagnostic snapshot of the step.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line entry points.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}
