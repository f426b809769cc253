use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MorlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MorlError {
    #[error("invalid action {0}, expected 0 or 1")]
    InvalidAction(i64),

    #[error("state has non-finite components")]
    NonFiniteState,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{line}:{column}: unknown feature `{name}`")]
    UnknownFeature {
        line: usize,
        column: usize,
        name: String,
    },

    #[error("malformed tree: {0}")]
    MalformedTree(String),

    #[error("node {0} does not exist")]
    UnknownNode(usize),

    #[error("node {node} is not {expected} node")]
    KindMismatch { node: usize, expected: &'static str },

    #[error("edit script line {line}: {message}")]
    EditScript { line: usize, message: String },

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("parameter vector has length {actual}, architecture needs {expected}")]
    ParamLength { expected: usize, actual: usize },

    #[error("run directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MorlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MorlError::Io {
            path: path.into(),
            source,
        }
    }
}
