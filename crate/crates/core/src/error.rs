use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("no maskable target in scene {0}")]
    NoMaskableTarget(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("token id {token} outside vocabulary of size {vocab}")]
    Vocabulary { token: usize, vocab: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("training diverged at step {step}: loss {loss} exceeds {limit}")]
    Diverged { step: usize, loss: f64, limit: f64 },

    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(usize),

    #[error("data error in {path}:{line}: {msg}")]
    Data { path: String, line: usize, msg: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn data(path: impl std::fmt::Display, line: usize, msg: impl Into<String>) -> Self {
        Error::Data { path: path.to_string(), line, msg: msg.into() }
    }
}
