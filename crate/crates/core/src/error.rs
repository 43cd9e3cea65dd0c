use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("{path}:{line}: {message}")]
    Row { path: PathBuf, line: u64, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("verbalizer for feature `{feature}` has no phrase for value `{value}`")]
    UnmappedValue { feature: String, value: String },

    #[error("vocabulary word `{word}`: {reason}")]
    Vocabulary { word: String, reason: String },

    #[error("model `{model}` cannot {operation}: {reason}")]
    Capability {
        model: String,
        operation: &'static str,
        reason: String,
    },

    #[error("input of {tokens} tokens (prefix {prefix}) exceeds the model budget of {budget}")]
    TooLong {
        tokens: usize,
        prefix: usize,
        budget: usize,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
