use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("inconsistent id: {0}")]
    InconsistentId(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("vocabulary inconsistency: {0}")]
    Vocabulary(String),

    #[error("snapshot statistics do not match manifest: {0}")]
    StatsMismatch(String),

    #[error("snapshot fractions must sum to 1.0, got {0}")]
    FractionMismatch(f64),

    #[error("too few triples: {0}")]
    TooFewTriples(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("adapter rows are not contiguous: {0}")]
    OffsetGap(String),

    #[error("score function {0} needs an even embedding dimension, got {1}")]
    OddDimension(&'static str, usize),

    #[error("unknown {kind} id {id} (vocabulary size {size})")]
    UnknownId {
        kind: &'static str,
        id: usize,
        size: usize,
    },

    #[error("training diverged at snapshot {snapshot}, epoch {epoch}: {detail}")]
    Diverged {
        snapshot: usize,
        epoch: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
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
}
