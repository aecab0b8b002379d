use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} at row {row}: {message}")]
    Parse {
        file: String,
        row: usize,
        message: String,
    },

    #[error("subject {subject} in the longitudinal file has no event record")]
    Linkage { subject: String },

    #[error("invalid data for subject {subject}: {message}")]
    Validation { subject: String, message: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive definite: {0}")]
    Factorization(String),

    #[error("truncated normal sampling failed: {0}")]
    Sampling(String),

    #[error("E-step degenerate for subject {subject}: {message}")]
    Degenerate { subject: String, message: String },

    #[error("singular system in {0}")]
    Singular(String),

    #[error("objective evaluation failed: {0}")]
    Objective(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bootstrap failed: {0}")]
    Bootstrap(String),

    #[error("grid mismatch: {0}")]
    Alignment(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(subject: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            subject: subject.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}
