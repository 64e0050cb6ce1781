use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    VocabRange { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds maximum of {max} positions")]
    LengthExceeded { len: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: combined loss {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
