use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: missing field `{field}`")]
    MissingField {
        path: PathBuf,
        line: usize,
        field: &'static str,
    },

    #[error("duplicate {kind} id `{id}` (line {line})")]
    DuplicateId {
        kind: &'static str,
        id: String,
        line: usize,
    },

    #[error("query `{qid}` references unknown document `{gold_id}`")]
    UnknownGold { qid: String, gold_id: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("vocabulary is empty after filtering")]
    EmptyVocab,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("cannot sample {needed} negatives from {available} candidates")]
    InsufficientNegatives { needed: usize, available: usize },

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("analyzer mismatch: model built for {expected}, index uses {got}")]
    AnalyzerMismatch { expected: String, got: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
