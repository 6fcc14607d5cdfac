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

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("query `{query}` references label {label} unknown to the corpus")]
    UnknownLabel { query: String, label: String },

    #[error("example `{0}` has no label")]
    Unlabeled(String),

    #[error("no ground truth for `{0}`")]
    MissingTruth(String),

    #[error("example `{0}` has no domain tag")]
    MissingDomain(String),

    #[error("text of `{id}` has no features to embed")]
    EmptyEmbedding { id: String },

    #[error("label corpus is empty")]
    EmptyCorpus,

    #[error("budget {budget} exceeds pool size {pool}")]
    BudgetTooLarge { budget: usize, pool: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("annotation failed for batch {ids:?}: {reason}")]
    AnnotationFailed { ids: Vec<String>, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
