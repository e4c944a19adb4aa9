use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid affine spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate affinity: row {row} of the correlation matrix sums to zero")]
    DegenerateAffinity { row: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: String, message: String },

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("decode error for {path}: {message}")]
    Decode { path: String, message: String },

    #[error("numeric overflow in {layer}: non-finite activation")]
    NumericOverflow { layer: String },

    #[error("NaN loss at step {step}; last good checkpoint: {checkpoint}")]
    NanLoss { step: usize, checkpoint: String },

    #[error("schedule exhausted: step {step} >= total {total}")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
