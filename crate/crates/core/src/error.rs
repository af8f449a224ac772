//! Crate-wide error type.
//!
//! Variants map one-to-one onto the CLI failure classes (config, data,
//! numeric, io) so exit codes can be derived without string matching.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform; the message names the offending shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Graph misuse: consumed tape, unknown node, non-scalar loss.
    #[error("graph error: {0}")]
    Graph(String),

    /// Invalid configuration value; the message names the field.
    #[error("invalid config: {0}")]
    Config(String),

    /// Invalid or inconsistent data (corpus, splits, spans, targets).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite losses, constraint violations, failed convergence checks.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed persisted file (checkpoint, corpus, manifest, gate, report).
    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format(_) => 3,
            Error::Numeric(_) | Error::Shape(_) | Error::Graph(_) => 4,
            Error::Io(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
