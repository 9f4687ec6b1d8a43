use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration holds no POIs")]
    EmptyConfiguration,
    #[error("cannot partition an {n}x{n} grid into {zones} bands")]
    InfeasiblePartition { zones: usize, n: usize },
    #[error("category {category} is outside [0, {count})")]
    InvalidCategory { category: usize, count: usize },
    #[error("trajectory corpus is empty")]
    EmptyCorpus,
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("vector does not sum to 1 (sum = {0})")]
    NotNormalized(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("unknown instruction attribute `{0}`")]
    UnknownAttribute(String),
    #[error("level {level} out of range for {levels} levels")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("could not parse instruction `{text}`")]
    UnparsableInstruction { text: String, suggestions: Vec<String> },
    #[error("instruction text is empty")]
    EmptyText,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("session is closed")]
    SessionClosed,
    #[error("session `{0}` not found")]
    SessionNotFound(String),
    #[error("session has no plan to refine yet")]
    NoPriorPlan,
    #[error("unknown context `{0}`")]
    UnknownContext(String),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch { what, expected, found }
    }
}
