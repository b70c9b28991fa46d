//! Crate-wide error type.
//!
//! Shape mismatches between matrices are treated as programmer error and
//! panic at the call site; everything that can go wrong with user-supplied
//! data or files surfaces here as a distinct variant.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value-level precondition failed (empty input, non-finite entry,
    /// out-of-range label, bad K, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration field failed validation.
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    /// Both weight vectors of an MMD term must carry positive total mass.
    #[error("empty cluster: total weight is zero on the {side} side")]
    EmptyCluster { side: &'static str },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint file exists but is not a readable checkpoint.
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    /// Checkpoint was written by an incompatible format revision.
    #[error("checkpoint {path} has format version {found}, expected {expected}")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    /// Checkpoint dimensions do not match the data it is being bound to.
    #[error("dimension mismatch: checkpoint has {checkpoint}, data requires {required}")]
    DimensionMismatch {
        checkpoint: String,
        required: String,
    },

    /// A CSV row could not be parsed; `line` is 1-based and counts the header.
    #[error("{path} line {line}: {reason}")]
    CsvFormat {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// CSV header or column layout does not match the expected schema.
    #[error("{path}: schema error: {reason}")]
    CsvSchema { path: PathBuf, reason: String },

    /// A stage of a chained adaptation failed; `stage` is 0-based.
    #[error("chain stage {stage} failed: {source}")]
    ChainStage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
