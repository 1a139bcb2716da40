//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; the message names the offending field.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary container or file format.
    #[error("format error: {0}")]
    Format(String),

    /// Internally inconsistent inputs (count mismatches, misaligned ids).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Bad runtime input to an otherwise valid operation.
    #[error("input error: {0}")]
    Input(String),

    /// Problem size exceeds what the operation can handle.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// The constrained least-squares system has no unique solution.
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    /// Stored digest does not match recomputed content digest.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("training error: {0}")]
    Training(String),

    /// A pipeline-stage precondition failed; carries the process exit code
    /// the command-line front end reports.
    #[error("{message}")]
    Stage { exit_code: i32, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
