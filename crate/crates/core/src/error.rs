use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the model pipeline.
#[derive(Debug, Error)]
pub enum AmnError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("version mismatch in {what}: found {found}, expected {expected}")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("training diverged at step {step} (epoch {epoch}): {detail}")]
    Diverged {
        step: usize,
        epoch: usize,
        detail: String,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AmnError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        AmnError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AmnError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AmnError>;
