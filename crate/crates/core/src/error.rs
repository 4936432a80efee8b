// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Result alias used throughout `transcirc`.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector contained NaN or an infinity.
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    /// Two operands had incompatible shapes.
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    /// Cosine similarity (or any normalization) of a zero vector.
    #[error("zero vector in {0}: direction is undefined")]
    ZeroVector(String),

    /// Input is degenerate for the requested decomposition.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Configuration could not be parsed or is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A required upstream record (subspace, mean vector, artifact) is missing.
    #[error("missing record: {0}")]
    Missing(String),

    /// A binary container is corrupt or inconsistent.
    #[error("corrupt file at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn mismatch(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    /// True for errors caused by user input or configuration rather than a bug.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Diverged { .. })
    }
}
