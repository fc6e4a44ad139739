use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("unbound graph input `{0}`")]
    Unbound(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("backward requires a scalar output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("swap negative `{subtype}` not applicable: {reason}")]
    Inapplicable { subtype: String, reason: String },
    #[error("caption does not parse: {0}")]
    Parse(String),
    #[error("degenerate statistic: {0}")]
    Degenerate(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("bad file format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
