use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid ontology: {0}")]
    Ontology(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: i64, len: usize },
    #[error("word vectors: {0}")]
    WordVectors(String),
    #[error("invalid dataset spec: {0}")]
    DatasetSpec(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("non-finite loss at step {step}; diagnostic checkpoint written to {checkpoint}")]
    NonFinite { step: u64, checkpoint: PathBuf },
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Error {
        Error::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
