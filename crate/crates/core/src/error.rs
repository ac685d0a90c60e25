use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("task set generation: {0}")]
    TaskGeneration(String),

    #[error("scene placement failed for {task} after {attempts} attempts")]
    Placement { task: String, attempts: usize },

    #[error("task {task} references object type {type_id} which is absent from the scene")]
    MissingObject { task: String, type_id: usize },

    #[error("expert failed on {task} after {attempts} attempts")]
    ExpertFailure { task: String, attempts: usize },

    #[error("degenerate embedding: norm {0:e} below 1e-8")]
    DegenerateEmbedding(f64),

    #[error("dataset for {task} has {demos} demos; one-shot pairs need at least 2")]
    TooFewDemos { task: String, demos: usize },

    #[error("{0} requires a non-empty input")]
    EmptyInput(&'static str),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("format error in {path}: {reason} (byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("stale input {path}: expected hash {expected}, found {found}")]
    StaleInput {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used for CLI exit messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::NonFinite { .. } | Error::NotScalar(_) | Error::InvalidTensor(_) => {
                "numeric"
            }
            Error::TaskGeneration(_)
            | Error::Placement { .. }
            | Error::MissingObject { .. }
            | Error::ExpertFailure { .. } => "world",
            Error::DegenerateEmbedding(_) | Error::TooFewDemos { .. } | Error::EmptyInput(_) | Error::Divergence { .. } => {
                "training"
            }
            Error::Config { .. } => "config",
            Error::Format { .. } | Error::StaleInput { .. } | Error::MissingArtifact { .. } | Error::Serde(_) => "artifact",
            Error::Io { .. } => "io",
        }
    }
}
