use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite observation for {0}")]
    NonFinite(String),
    #[error("missing parameter: {0}")]
    MissingParameter(String),
    #[error("unknown parameter column: {0}")]
    UnknownParameter(String),
    #[error("unknown setting: {0}")]
    UnknownSetting(String),
    #[error("duplicate parameter id: {0}")]
    DuplicateParameter(String),
    #[error("non-monotone timestamps at row {row}")]
    NonMonotone { row: usize },
    #[error("overlapping runs: {0} and {1}")]
    OverlappingRuns(String, String),
    #[error("invalid run {0}: start must precede end")]
    InvalidRun(String),
    #[error("duplicate batch id: {0}")]
    DuplicateRun(String),
    #[error("empty after alignment")]
    EmptyAfterAlignment,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("empty node")]
    EmptyNode,
    #[error("empty interval: ({low}, {high}]")]
    EmptyInterval { low: f64, high: f64 },
    #[error("unmatched sample at t={0}")]
    UnmatchedSample(i64),
    #[error("sample at t={0} matches more than one state")]
    OverlappingStates(i64),
    #[error("no matching status state")]
    NoMatchingStatus,
    #[error("no evaluable runs")]
    NoEvaluableRuns,
    #[error("material type has no test runs: {0}")]
    NoTestRuns(String),
    #[error("material type has no training runs: {0}")]
    NoTrainingRuns(String),
    #[error("invalid timestamp {0:?}")]
    InvalidTimestamp(String),
    #[error("unsupported bundle format version {0}")]
    FormatVersion(u32),
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
