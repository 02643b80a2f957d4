use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of bounds for length {len}")]
    Bounds { index: usize, len: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocab { id: usize, vocab: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty statistics: {0}")]
    EmptyStatistics(String),
    #[error("parameter `{0}` is frozen")]
    Frozen(String),
    #[error("missing gradient: {0}")]
    MissingGradient(String),
    #[error("undefined stage: {0}")]
    UndefinedStage(String),
    #[error("out of sequence: {0}")]
    Sequencing(String),
    #[error("missing cache: {0}")]
    MissingCache(String),
    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),
    #[error("no task has been trained yet")]
    Untrained,
    #[error("empty batch")]
    EmptyBatch,
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by user-supplied input rather than a failure mid-run.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Malformed(_) | Error::Csv(_) | Error::IncompleteMatrix(_)
        )
    }
}
