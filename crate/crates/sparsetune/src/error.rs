//! Error surface shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced NaN or Inf. Finite inputs must yield finite
    /// outputs; a non-finite value is reported instead of propagated.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// A softmax row had every entry masked away; there is nothing to
    /// normalize over.
    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    /// Reverse-mode differentiation requires a scalar root.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A serialized blob could not be decoded.
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    /// Training aborted because the loss left the finite range.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    #[error("unknown preset '{0}'")]
    UnknownPreset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
