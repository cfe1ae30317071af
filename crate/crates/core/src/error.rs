use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("softmax row {row} has no finite entry")]
    NoFiniteEntry { row: usize },

    #[error("zero-norm vector{}", .context.as_deref().map(|c| format!(" at {c}")).unwrap_or_default())]
    ZeroVector { context: Option<String> },

    #[error("cache inconsistency: {0}")]
    Cache(String),

    #[error("early-exit head is not present on this student")]
    MissingExitHead,

    #[error("tape has already been consumed by a backward pass")]
    TapeReused,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
