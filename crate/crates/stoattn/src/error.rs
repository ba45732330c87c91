//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar parameter is outside its documented domain.
    #[error("invalid parameter {name}: {reason}")]
    Param { name: &'static str, reason: String },

    /// An operation was called outside its contract (wrong state, empty
    /// input, out-of-range label, ...).
    #[error("contract violation in {op}: {reason}")]
    Contract { op: &'static str, reason: String },

    /// Non-finite value detected where finiteness is guaranteed.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// Invalid run or model configuration; lists the offending keys.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset could not be loaded or is unusable.
    #[error("data error: {0}")]
    Data(String),

    /// Training aborted (divergence, NaN gradients).
    #[error("training error: {0}")]
    Train(String),

    /// Loss became non-finite; carries the history recorded so far.
    #[error("training diverged at epoch {at_epoch}")]
    Diverged {
        at_epoch: usize,
        history: Box<crate::training::TrainHistory>,
    },

    /// Checkpoint file is missing, corrupt, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Param {
            name,
            reason: reason.into(),
        }
    }

    pub fn contract(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Contract {
            op,
            reason: reason.into(),
        }
    }
}
