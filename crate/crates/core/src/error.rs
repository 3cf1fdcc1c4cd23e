use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("category out of range: {value} not in 1..={n} (sequence {id})")]
    CategoryOutOfRange { id: String, value: i64, n: usize },

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("duplicate sequence id: {0}")]
    DuplicateId(String),

    #[error("number of categories unknown: pass it explicitly or add a {{\"n\": <int>}} header line")]
    UnknownCategoryCount,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("changepoint {tau} outside support {lo}..={hi}")]
    OutsideSupport { tau: usize, lo: usize, hi: usize },

    #[error("invalid changepoint vector: {0}")]
    InvalidChangepoints(String),

    #[error("sequence {0} has missing values; use the marginal likelihood")]
    HasMissing(String),

    #[error("fold count {folds} out of range for {sequences} sequences")]
    FoldCount { folds: usize, sequences: usize },

    #[error("empty test set in fold {0}")]
    EmptyTestSet(usize),

    #[error("empty posterior sample set")]
    EmptySamples,

    #[error("unknown sequence id: {0}")]
    UnknownSequence(String),

    #[error("fold plans differ between reports")]
    MismatchedPlans,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
