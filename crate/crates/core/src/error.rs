//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest error at {path}: {msg}")]
    Ingest { path: PathBuf, msg: String },
    #[error("malformed index line {line} in {path}: {msg}")]
    IngestLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("index {index} out of range (len {len})")]
    Range { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered: {0}")]
    Numeric(String),
    #[error("token id {id} out of vocabulary (size {vocab})")]
    Vocab { id: usize, vocab: usize },
    #[error("weight load failed: {0}")]
    WeightLoad(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("loss undefined: {0}")]
    Loss(String),
    #[error("metrics undefined: {0}")]
    Metrics(String),
    #[error("training failed at step {step}: {msg}")]
    Train { step: usize, msg: String },
    #[error("split requires scene class {class:?} which is missing from the pool")]
    Split { class: String },
    #[error("report error: {0}")]
    Report(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
