use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("matrix must have at least one row and one column")]
    EmptyMatrix,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("label values must be 0 or 1, found {0}")]
    InvalidLabel(f64),
    #[error("all labels belong to a single class")]
    SingleClass,
    #[error("spectrum is degenerate (all-zero matrix)")]
    DegenerateSpectrum,
    #[error("scores are degenerate (range below 1e-12)")]
    DegenerateScores,
    #[error("labels are constant; distance covariance of labels is zero")]
    DegenerateLabels,
    #[error("embedding rows are identical; distance covariance of embeddings is zero")]
    DegenerateEmbeddings,
    #[error("backward called without a matching forward pass")]
    StaleCache,
    #[error("index {index} out of range for vocabulary of size {vocab}")]
    IndexOutOfRange { index: usize, vocab: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("malformed row {row}: expected {expected} fields, got {got}")]
    MalformedRow { row: usize, expected: usize, got: usize },
    #[error("row {row}, column '{column}': cannot parse '{value}' as a real number")]
    UnparseableReal { row: usize, column: String, value: String },
    #[error("schema declares no label column")]
    MissingLabelColumn,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
