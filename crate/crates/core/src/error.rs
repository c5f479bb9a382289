use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("label `{label}` in {split} split is not in the label vocabulary {vocabulary:?}")]
    UnknownLabel {
        label: String,
        split: &'static str,
        vocabulary: Vec<String>,
    },

    #[error("class `{class}` has {available} examples, {requested} requested per class")]
    InsufficientClass {
        class: String,
        available: usize,
        requested: usize,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing predictor labels for {} unlabeled input(s): {inputs:?}", inputs.len())]
    MissingPredictorLabels { inputs: Vec<String> },

    #[error("non-finite training loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("synthetic task: {0}")]
    Synthetic(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
