//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the op's contraction/broadcast rule.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A shape/argument constraint on a single operand failed.
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// Division by an L2 norm of zero was requested.
    #[error("{op}: zero vector has no direction")]
    ZeroVector { op: &'static str },

    /// `backward` was called on a non-scalar tensor.
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// Token id outside the encoder vocabulary.
    #[error("token id {id} out of vocabulary (vocab_size {vocab_size})")]
    OutOfVocab { id: usize, vocab_size: usize },

    #[error("empty sequence passed to {op}")]
    EmptySequence { op: &'static str },

    #[error("invalid config: {0}")]
    Config(String),

    /// Loss became non-finite; the offending batch was dumped for inspection.
    #[error("non-finite loss at stage {stage} epoch {epoch} step {step}; batch dump: {dump}")]
    NanAbort {
        stage: u8,
        epoch: usize,
        step: usize,
        dump: String,
    },

    /// Optimizer was asked to step parameters that received no gradient.
    #[error("missing gradients for parameters: {}", names.join(", "))]
    MissingGrad { names: Vec<String> },

    /// Checkpoint file rejected (bad magic, version, or checksum).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Corpus file rejected (bad schema version or malformed line).
    #[error("corpus format error: {0}")]
    CorpusFormat(String),

    #[error("stage tag mismatch: expected {expected}, found {found}")]
    StageTag { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
