use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("k = {k} exceeds codebook size {c}")]
    KTooLarge { k: usize, c: usize },

    #[error("query dimension {0} is odd and cannot be split into two sub-queries")]
    OddQueryDim(usize),

    #[error("no active target positions")]
    EmptyTargets,

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("backward called without a forward cache")]
    MissingCache,

    #[error("row {row} out of range for table with {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },

    #[error("model has no classification head")]
    MissingHead,

    #[error("vocabulary has no [MASK] symbol")]
    NoMaskToken,

    #[error("access log is empty")]
    EmptyLog,

    #[error("snapshot {index} has {got} slots, expected {expected}")]
    SlotCountMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },

    #[error("class usage for {0} examples is empty")]
    EmptyClass(&'static str),

    #[error("dataset contains a single class")]
    SingleClass,

    #[error("corpus has {tokens} tokens, fewer than one sequence of {needed}")]
    CorpusTooSmall { tokens: usize, needed: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("unsupported checkpoint manifest version {0}")]
    ManifestVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
