use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AesError>;

#[derive(Debug, Error)]
pub enum AesError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("validation error in record {index}, field `{field}`: {message}")]
    Validation {
        index: usize,
        field: String,
        message: String,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid split ratios: {0}")]
    InvalidSplit(String),

    #[error("vocabulary target size {target} cannot hold {required} mandatory entries")]
    TargetTooSmall { target: usize, required: usize },

    #[error("max_len {0} is below the minimum of 8")]
    MaxLenTooSmall(usize),

    #[error("token id {id} is outside the vocabulary of size {size}")]
    UnknownId { id: u32, size: usize },

    #[error("malformed vocabulary: {0}")]
    InvalidVocab(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("token id {id} out of range for vocab size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("forward pass was run without a training cache")]
    MissingCache,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("value {value} is not one of the rating categories")]
    ValueOffGrid { value: i64 },

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite input: {0}")]
    NonFiniteInput(f64),
}

impl AesError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AesError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(index: usize, field: &str, message: impl Into<String>) -> Self {
        AesError::Validation {
            index,
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, AesError::Io { .. })
    }
}
