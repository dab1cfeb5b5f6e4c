use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grammar: {0}")]
    Grammar(String),

    #[error("parse failure: sentence {sentence:?} does not parse under the grammar")]
    ParseFailure { sentence: String },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("noise error: {0}")]
    Noise(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("training diverged at {stage} step {step}: loss {loss}")]
    Diverged { stage: String, step: usize, loss: f64 },

    #[error("training error: {0}")]
    Train(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("artifact error at {path}: {msg}")]
    Artifact { path: PathBuf, msg: String },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }
}
