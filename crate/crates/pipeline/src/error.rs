use std::path::PathBuf;

use thiserror::Error;
use trustvl_core::{TensorError, VocabError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Schema { path: String, line: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("evidence: {0}")]
    Evidence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training: {0}")]
    Training(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("image: {0}")]
    Image(String),
    #[error("length mismatch: {0} predictions for {1} labels")]
    LengthMismatch(usize, usize),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable class name.
    pub fn class(&self) -> &'static str {
        match self {
            PipelineError::Io { .. } => "io",
            PipelineError::Schema { .. } => "schema",
            PipelineError::Tensor(_) => "numeric",
            PipelineError::Vocab(_) => "vocab",
            PipelineError::Evidence(_) => "evidence",
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::Config(_) => "config",
            PipelineError::Training(_) => "training",
            PipelineError::Transport(_) => "transport",
            PipelineError::Image(_) => "image",
            PipelineError::LengthMismatch(..) => "length_mismatch",
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
