//! Crate-wide error type. Every fallible public operation returns [`Result`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmqError {
    /// A tensor or argument failed a shape / range / domain precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration file, key, or combination of settings is unusable.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss; carries enough to reproduce the batch.
    #[error("non-finite loss at step {step} (batch seed {batch_seed}): {details}")]
    NonFinite {
        step: usize,
        batch_seed: u64,
        details: String,
    },

    /// Checkpoint bytes did not parse or did not match the expected model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, LmqError>;

impl LmqError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        LmqError::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        LmqError::Config(msg.into())
    }
}
