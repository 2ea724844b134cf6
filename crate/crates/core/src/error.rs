use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the CPFT pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {utterances} utterances but {labels} labels")]
    PairCountMismatch {
        path: PathBuf,
        utterances: usize,
        labels: usize,
    },

    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),

    #[error("dataset `{name}` has no utterances in the {split} split")]
    EmptySplit { name: String, split: &'static str },

    #[error("pretraining corpus is empty after filtering")]
    EmptyCorpus,

    #[error("class `{class}` has {available} train utterances, need {required}")]
    NotEnoughExamples {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("sequence has no maskable position")]
    NothingToMask,

    #[error("embedding {index} has zero norm")]
    ZeroNorm { index: usize },

    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),

    #[error("no masked positions in batch")]
    NoMaskedPositions,

    #[error("no positive pairs in batch")]
    NoPositivePairs,

    #[error("label index {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },

    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("vocabulary hash mismatch: checkpoint {expected}, got {actual}")]
    VocabMismatch { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
