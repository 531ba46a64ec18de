use std::io;

use thiserror::Error;

use crate::diffmath::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("enumeration needs {count} subsets, budget is {limit}")]
    Budget { count: u128, limit: u128 },
    #[error("no valid episode after {attempts} attempts (seed {seed}, episode {index})")]
    Generation { seed: u64, index: u64, attempts: u32 },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },
    #[error("truncated input at byte offset {offset}: {detail}")]
    Truncated { offset: u64, detail: String },
    #[error("malformed input at {location}: {detail}")]
    Malformed { location: String, detail: String },
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: u64, breakdown: String },
    #[error("non-finite parameter {name} after step {step}")]
    NonFiniteParam { step: u64, name: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Diff(DiffError::NonFinite { .. }) => ErrorKind::Numeric,
            Error::NonFiniteLoss { .. } | Error::NonFiniteParam { .. } => ErrorKind::Numeric,
            Error::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    /// Stable machine-readable identifier of the failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Diff(DiffError::NonFinite { .. }) => "non_finite",
            Error::Diff(_) => "graph",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Budget { .. } => "budget",
            Error::Generation { .. } => "generation",
            Error::BadMagic { .. } => "bad_magic",
            Error::BadVersion { .. } => "bad_version",
            Error::Truncated { .. } => "truncated",
            Error::Malformed { .. } => "malformed",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NonFiniteParam { .. } => "non_finite_param",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
