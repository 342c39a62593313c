//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between tensors, naming both shapes.
    #[error("dimension mismatch: {context}: {lhs:?} vs {rhs:?}")]
    Dimension {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid parameter value or configuration.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Contract violation (e.g. non-scalar loss passed to backward).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Unknown token, with the known vocabulary listed.
    #[error("unknown token {token:?}; known tokens: {known:?}")]
    Vocabulary { token: String, known: Vec<String> },

    /// Malformed input data (bad pixel range, wrong image shape, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A probe run did not produce a complete trace.
    #[error("trace integrity: {0}")]
    TraceIntegrity(String),

    /// Checkpoint is incompatible with the loaded model.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// Corrupt or truncated file, with the byte offset where parsing failed.
    #[error("format error at offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Missing precomputed state (e.g. style centroids not built yet).
    #[error("missing state: {0}")]
    State(String),

    /// Numeric failure (NaN/Inf encountered where finite values are required).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A prerequisite artifact (checkpoint, manifest, ...) is missing.
    #[error("missing artifact: {0}")]
    Artifact(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn dimension(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
