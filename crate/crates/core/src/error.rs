use std::io;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a documented precondition (empty image, zero stride, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two components disagree on a shared contract (shapes, dims, windows).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A provider could not be reached or answered with a failure status.
    #[error("transport error after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport {
        message: String,
        status: Option<u16>,
        retryable: bool,
        attempts: u32,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("malformed bank file: {0}")]
    Format(String),

    #[error("unsupported bank file version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! invalid_input {
    ($($arg:tt)*) => { $crate::Error::InvalidInput(format!($($arg)*)) };
}

macro_rules! contract {
    ($($arg:tt)*) => { $crate::Error::ContractViolation(format!($($arg)*)) };
}

pub(crate) use contract;
pub(crate) use invalid_input;
