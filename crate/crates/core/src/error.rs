//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for tensor, data, and training failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that were required to agree did not.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An axis argument was outside the tensor's rank.
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    /// A caller violated an API precondition (non-scalar loss, missing grads, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (bad split ratios, indivisible patch length, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A CSV file could not be ingested.
    #[error("ingestion error{}: {msg}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Ingestion { row: Option<usize>, msg: String },

    /// A numeric routine failed (non-finite values, non-SPD solve, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training aborted on a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn ingestion(row: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Ingestion {
            row,
            msg: msg.into(),
        }
    }
}
