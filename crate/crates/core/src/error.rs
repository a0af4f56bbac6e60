use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("softmax row {row} has no unmasked position")]
    FullyMaskedRow { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("source and target corpora are not aligned: {0}")]
    AlignmentMismatch(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("id {id} is outside the vocabulary of size {size}")]
    UnknownId { id: usize, size: usize },

    #[error("source of {len} tokens exceeds the window limit of {limit}")]
    SourceTooLong { len: usize, limit: usize },

    #[error("source sentence is empty")]
    EmptySource,

    #[error("position id {position} exceeds max_positions {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("decoder prefix must be non-empty and start with [BOS]")]
    EmptyPrefix,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("training diverged at step {step}: {reason}")]
    TrainingDiverged { step: u64, reason: String },

    #[error("bad magic bytes, expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("example of {len} tokens exceeds the batch budget of {budget}")]
    ExampleTooLong { len: usize, budget: usize },

    #[error("hypotheses ({hyps}) and references ({refs}) differ in count")]
    LengthMismatch { hyps: usize, refs: usize },

    #[error("checkpoint does not match the model or vocabulary: {0}")]
    CheckpointMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line tool: 2 for bad input or
    /// configuration, 3 for divergence, 4 for checkpoint or vocabulary
    /// mismatches and 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::TrainingDiverged { .. } => 3,
            Error::CheckpointMismatch(_) | Error::BadMagic { .. } | Error::TruncatedFile(_) | Error::DuplicateName(_) => 4,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}
