use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PclError>;

#[derive(Debug, Error)]
pub enum PclError {
    /// Inconsistent shapes, out-of-range settings, missing streams.
    #[error("configuration error: {0}")]
    Config(String),

    /// A training or evaluation image violates a precondition.
    #[error("data error: {0}")]
    Data(String),

    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PclError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PclError::Io {
            path: path.into(),
            source,
        }
    }
}
