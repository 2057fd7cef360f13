//! Error type shared across the workbench.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not enough distinct combinations: need {needed}, have {available}")]
    InsufficientCombinations { needed: usize, available: usize },

    #[error("complementizer flag not applicable to structure `{structure}`")]
    InvalidFlag { structure: String },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {token} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("unknown token `{0}` for this lexicon")]
    UnknownToken(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("patch target out of range: {0}")]
    PatchOutOfRange(String),

    #[error("degenerate probability: {0}")]
    DegenerateProbability(String),

    #[error("training diverged at step {step}: loss {loss}")]
    DivergenceDetected { step: usize, loss: f64 },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("incomplete sweep: {0}")]
    IncompleteSweep(String),

    #[error("selected sets differ in size: {0}")]
    SetSizeMismatch(String),

    #[error("matrix labels mismatch: {0}")]
    LabelMismatch(String),

    #[error("unmatched prompt ids: {0}")]
    UnmatchedPrompts(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("provenance digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code: 2 validation, 3 degenerate probability, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateProbability(_) => 3,
            Error::IoFailure { .. } | Error::CorruptCheckpoint { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure { path: path.into(), source }
    }
}
