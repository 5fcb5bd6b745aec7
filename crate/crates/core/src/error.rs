//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration is internally inconsistent (divisibility, layer
    /// counts, strategy/teacher pairing, mismatched members).
    #[error("configuration error: {0}")]
    Config(String),

    /// An input violates an operation precondition (shape mismatch, label
    /// out of range, negative entries, empty dataset).
    #[error("input error: {0}")]
    Input(String),

    /// A scalar parameter is out of its admissible range (temperature,
    /// epoch index, rank).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A manifest file does not match the documented schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A subject does not have enough records for the requested split.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A domain filter matched no records.
    #[error("empty domain: {0}")]
    EmptyDomain(String),

    /// The requested operation combination is not supported
    /// (e.g. internal embeddings from an ensemble teacher).
    #[error("unsupported combination: {0}")]
    Unsupported(String),

    /// Degenerate numeric input, e.g. a zero-norm row in a cosine loss.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Token layout cannot be mapped back to a square grid.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Run records cannot be aggregated together.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// A checkpoint file is malformed or does not match its config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Filesystem or decode failure, carrying the offending path.
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Io {
            path: path.into(),
            message: message.into(),
        }
    }
}
