use thiserror::Error;

#[derive(Error, Debug)]
pub enum LqsgError {
    /// Malformed input: wrong shapes, non-finite samples, missing blocks.
    #[error("structural error: {0}")]
    Structural(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("regression failed at node {node}: {reason}")]
    Regression { node: usize, reason: String },
    #[error("inadmissible control: {0}")]
    Inadmissible(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LqsgError>;
