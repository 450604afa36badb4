use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dialogue {id}: context is empty")]
    EmptyContext { id: String },
    #[error("dialogue {id}: {what} has no tokens")]
    EmptyUtterance { id: String, what: String },
    #[error("dialogue {id}: gold rewrite is missing")]
    MissingRewrite { id: String },
    #[error("vocabulary must start with the reserved tokens and contain no duplicates")]
    InvalidVocab,
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Overlength { len: usize, max_len: usize },
    #[error("empty pooling span ({start}, {end})")]
    EmptySpan { start: usize, end: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("merge alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("negative loss weight {0}")]
    NegativeWeight(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty reference set")]
    EmptyReferences,
    #[error("unsupported n-gram order {0}")]
    UnsupportedOrder(usize),
    #[error("missing parameter {0}")]
    MissingParam(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
