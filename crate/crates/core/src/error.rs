use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset failed validation: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("artifact version `{found}` is incompatible with `{expected}`")]
    ArtifactVersion { found: String, expected: String },

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("no precomputed embedding for text hash {0}")]
    MissingEmbedding(String),

    #[error("batch embedding failed at indices {indices:?}: {message}")]
    Batch { indices: Vec<usize>, message: String },

    #[error("http error: {0}")]
    Http(String),

    #[error("replay miss for model `{model_id}`, stage `{stage}`, key {key_hash}")]
    ReplayMiss {
        model_id: String,
        stage: String,
        key_hash: String,
    },

    #[error("label extraction failed: {0}")]
    Extraction(String),

    #[error("every model failed every stage for instance `{0}`")]
    ChainFailed(String),

    #[error("numerical error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Stable short name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::ArtifactVersion { .. } => "artifact_version",
            Error::Embedding(_) => "embedding",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::Batch { .. } => "batch",
            Error::Http(_) => "http",
            Error::ReplayMiss { .. } => "replay_miss",
            Error::Extraction(_) => "extraction",
            Error::ChainFailed(_) => "chain_failed",
            Error::Numeric(_) => "numeric",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
