use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("mask alignment mismatch: {0}")]
    Alignment(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("sampling exhausted for label `{label}`: {detail}")]
    SamplingExhausted { label: String, detail: String },

    #[error("invalid stroke spec: {0}")]
    Spec(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("report error: {0}")]
    Report(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("session incomplete: {answered}/{total} items answered")]
    Incomplete { answered: usize, total: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
