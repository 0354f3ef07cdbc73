use crate::checkpoint::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("probe error: {0}")]
    Probe(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("vocabulary mismatch: expected hash {expected}, found hash {found}")]
    Compatibility { expected: String, found: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Option<Box<Checkpoint>>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
