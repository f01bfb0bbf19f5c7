//! Error types shared across the toolkit.
//!
//! Variants map onto the CLI exit codes: validation/configuration problems
//! exit with 2, capacity shortfalls with 3, training failures with 4, and
//! everything else (I/O, corrupt files) with 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user-supplied configuration (unknown dataset tag, missing files
    /// referenced by the config, budget overruns).
    #[error("configuration error: {0}")]
    Config(String),

    /// Argument outside its documented domain.
    #[error("validation error: {0}")]
    Validation(String),

    /// A persisted artifact fails its schema or an invariant on load.
    /// `field` names the first offending field.
    #[error("integrity error in {path}: field `{field}`: {reason}")]
    Integrity {
        path: String,
        field: String,
        reason: String,
    },

    /// Not enough records to satisfy a pool request.
    #[error("capacity error: needed {needed} {what}, only {available} available")]
    Capacity {
        what: String,
        needed: usize,
        available: usize,
    },

    /// Fewer conferrable candidates survived filtering than requested.
    #[error("conferrable shortfall: {accepted} accepted, {requested} requested")]
    Shortfall { accepted: usize, requested: usize },

    /// Training diverged or produced a non-finite loss.
    #[error("training error at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    /// Registry lookup miss.
    #[error("not found: {0}")]
    NotFound(String),

    /// A label oracle failed partway through a run. `completed` counts the
    /// answers received before the failure; nothing is silently truncated.
    #[error("oracle failed after {completed} answers: {reason}")]
    PartialResult { completed: usize, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 0 success, 2 validation, 3
    /// shortfall/capacity, 4 training failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) => 2,
            Error::Capacity { .. } | Error::Shortfall { .. } => 3,
            Error::Training { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
