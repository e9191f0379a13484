//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FktError>;

#[derive(Debug, Error)]
pub enum FktError {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An embedding row has zero norm or non-finite entries.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// Checkpoint backbone or dimensions do not match the receiving model.
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    /// Checkpoint file is unreadable or missing required tensors.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// Dataset files are missing or undecodable.
    #[error("ingest error: {0}")]
    Ingest(String),

    /// Configured checksum did not match the file on disk.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A loss or gradient became non-finite; the run aborts.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Writing run artifacts failed.
    #[error("persistence error: {0}")]
    Persistence(String),

    /// Batch size exceeds the split with drop_last set; no batch can be formed.
    #[error("empty epoch: {0}")]
    EmptyEpoch(String),
}

impl FktError {
    /// Stable process exit code for the CLI contract:
    /// 0 success, 2 config, 3 divergence, 4 checkpoint, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            FktError::InvalidInput(_) | FktError::InvalidConfig(_) => 2,
            FktError::DegenerateEmbedding(_) | FktError::Divergence(_) => 3,
            FktError::IncompatibleCheckpoint(_) | FktError::CorruptCheckpoint(_) => 4,
            FktError::Ingest(_) | FktError::Integrity(_) | FktError::Persistence(_) => 5,
            FktError::EmptyEpoch(_) => 2,
        }
    }
}
