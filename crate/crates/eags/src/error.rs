use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("{op}: {details}")]
    InvalidOp { op: &'static str, details: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("{path}: line {line}: {details}")]
    CorpusFormat {
        path: PathBuf,
        line: usize,
        details: String,
    },

    #[error("target too long at line {line}: {len} tokens exceeds maximum {max}")]
    TargetTooLong { line: usize, len: usize, max: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invariant violation: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
