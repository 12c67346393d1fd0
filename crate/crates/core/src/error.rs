//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TntError {
    /// Operand shapes are incompatible for an operation.
    #[error("{op}: shape mismatch ({details})")]
    Shape { op: &'static str, details: String },

    /// A configuration value is invalid or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numerical check (gradient check, finiteness guard) failed.
    #[error("numerical check failed: {0}")]
    Numeric(String),

    /// Filesystem error with the offending path attached.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A serialized artifact (checkpoint, tensor file, image) is malformed.
    #[error("bad file format: {0}")]
    Format(String),
}

impl TntError {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        TntError::Shape {
            op,
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TntError::Io {
            path: path.into(),
            source,
        }
    }
}
