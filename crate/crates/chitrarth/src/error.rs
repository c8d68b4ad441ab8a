//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unsupported modality: {0}")]
    UnsupportedModality(String),

    #[error("sample {id}: no supervised positions")]
    EmptySupervision { id: String },

    #[error("language {language}: need {needed} samples, source has {available}")]
    Capacity {
        language: String,
        needed: usize,
        available: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("parameter {name} has no gradient")]
    MissingGrad { name: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint config mismatch: {0}")]
    CheckpointConfig(String),

    #[error("image format error: {0}")]
    ImageFormat(String),

    #[error("empty evaluation set")]
    EmptyEval,

    #[error("non-finite loss at step {step} (batch samples: {samples:?})")]
    NonFiniteLoss { step: usize, samples: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Helper for line-addressed manifest errors.
    pub fn schema_at(line: usize, msg: impl std::fmt::Display) -> Self {
        Error::Schema(format!("line {line}: {msg}"))
    }

    /// Process exit code: 1 for usage/config problems, 2 for runtime aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Vocabulary { .. }
            | Error::Capacity { .. }
            | Error::Config(_)
            | Error::CheckpointConfig(_)
            | Error::UnsupportedModality(_)
            | Error::EmptyEval => 1,
            _ => 2,
        }
    }
}
