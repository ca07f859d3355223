use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension error: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("empty attention row {row}: every entry is -inf")]
    EmptyAttentionRow { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no target tokens: every position is ignored")]
    NoTargets,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("load error for {name}: {reason}")]
    Load { name: String, reason: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid hook {0}")]
    Hook(String),

    #[error("patch entry {index}: {reason}")]
    Patch { index: usize, reason: String },

    #[error("patch position {position} lies beyond the prompt of {prompt_len} tokens")]
    PatchPosition { position: usize, prompt_len: usize },

    #[error("cache error: {0}")]
    Cache(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("unsupported metric: {0}")]
    UnsupportedMetric(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("csv error writing {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    /// Errors caused by the caller's settings rather than by the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Mask(_) | Error::Template(_))
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
