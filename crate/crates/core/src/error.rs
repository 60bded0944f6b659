use std::path::PathBuf;

/// Errors produced by the cleaning toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {format} format version {version}")]
    UnsupportedVersion { format: &'static str, version: u32 },

    #[error("truncated {format} payload at byte offset {offset}: needed {needed} more byte(s) for {field}")]
    Truncated {
        format: &'static str,
        offset: usize,
        needed: usize,
        field: &'static str,
    },

    #[error("malformed {format} payload at byte offset {offset}: {reason}")]
    Malformed {
        format: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("invalid dataset at sample {sample_id}, position {position}: {reason}")]
    InvalidRecord {
        sample_id: u64,
        position: u32,
        reason: String,
    },

    #[error("length mismatch for {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("digest mismatch for {what}: expected {expected:016x}, found {found:016x}")]
    DigestMismatch {
        what: String,
        expected: u64,
        found: u64,
    },

    #[error("artifact {name} at {path} failed verification: {reason}")]
    Artifact {
        name: String,
        path: PathBuf,
        reason: String,
    },

    #[error("non-finite or negative loss {value} at token {index}")]
    InvalidLoss { index: usize, value: f64 },

    #[error("undefined loss: no positive labels")]
    UndefinedLoss,

    #[error("empty selection: k={k_percent}% of {eligible} eligible tokens selects nothing")]
    EmptySelection { k_percent: f64, eligible: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trainer failure: {0}")]
    Trainer(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Alignment,
    Trainer,
    Other,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::EmptySelection { .. }
            | Error::UndefinedLoss
            | Error::InvalidRecord { .. } => ErrorClass::Validation,
            Error::LengthMismatch { .. }
            | Error::DigestMismatch { .. }
            | Error::Artifact { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::Malformed { .. }
            | Error::InvalidLoss { .. } => ErrorClass::Alignment,
            Error::Trainer(_) => ErrorClass::Trainer,
            Error::Io(_) | Error::Json(_) => ErrorClass::Other,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
