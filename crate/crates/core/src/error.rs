use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("token id {id} at position {position} is out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence is not framed by BOS/EOS sentinels")]
    MissingSentinels,

    #[error("position {position} is out of range for content length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("masked position {0} does not hold the MASK token")]
    NotMasked(usize),

    #[error("vocabulary of {size} candidates is too large to enumerate (limit {limit}); use a char-level vocabulary or a candidate subset")]
    VocabTooLarge { size: usize, limit: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite {what} at step {step}, batch {batch}")]
    NonFinite {
        what: String,
        step: u64,
        batch: usize,
    },

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::train::checkpoint::CheckpointError),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("tokens not in vocabulary: {0:?}")]
    VocabMismatch(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
