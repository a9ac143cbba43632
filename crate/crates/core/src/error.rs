//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor math, model execution, and the experiment
/// pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input outside an operation's domain (log of a negative, zero scale, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced NaN or infinity where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint serialization / deserialization failure.
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Checkpoint-specific failures, kept as distinct variants so callers can
/// tell a stale file from a corrupt one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("tensor {name}: shape {shape:?} does not match {len} stored values")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
