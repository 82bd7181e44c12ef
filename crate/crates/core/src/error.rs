use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("interaction ({user}, {item}) out of range for {num_users} users x {num_items} items")]
    IndexOutOfRange {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },
    #[error("no interactions supplied")]
    EmptyInteractions,
    #[error("graph must have at least one user and one item")]
    EmptyUniverse,
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("non-finite value produced at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("trace is missing clip masks; record the forward pass with masks enabled")]
    MissingMasks,
    #[error("trace has {actual} recorded iterations but its config says {expected}")]
    TraceMismatch { expected: usize, actual: usize },
    #[error("every sampled user has interacted with all items; no negatives exist")]
    SaturatedUsers,
    #[error("cannot inject {requested} edges: only {available} absent pairs remain")]
    NoiseExhausted { requested: usize, available: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("checkpoint version error: {0}")]
    CheckpointVersion(String),
    #[error("checkpoint integrity error: {0}")]
    CheckpointIntegrity(String),
    #[error("checkpoint shape error: {0}")]
    CheckpointShape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
