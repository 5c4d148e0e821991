use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("example {id}: {reason}")]
    InvalidExample { id: String, reason: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("stochastic closure: gradient checking requires dropout to be disabled")]
    StochasticClosure,

    #[error("gold argument {argument} at step {step} is excluded by the decoder mask")]
    MaskedGold { step: usize, argument: String },

    #[error("gold argument at step {step} has zero probability")]
    ZeroProbability { step: usize },

    #[error("non-finite loss in batch {batch} (example {example})")]
    NonFiniteLoss { batch: usize, example: usize },

    #[error("misaligned corpora: {predicted} predicted sentences vs {gold} gold sentences")]
    Misaligned { predicted: usize, gold: usize },

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
