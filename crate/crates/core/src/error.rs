use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty training set: all class counts are zero")]
    EmptyTrainingSet,
    #[error("non-finite value at sample {index}: {what}")]
    NonFinite { index: usize, what: &'static str },
    #[error("training diverged at epoch {epoch}, step {step}: batch loss {loss}")]
    Diverged { epoch: usize, step: u64, loss: f64 },
    #[error("stale embeddings: norms computed with params version {found}, current is {expected}")]
    StaleEmbeddings { expected: u64, found: u64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
