use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("column `{0}` not found")]
    ColumnNotFound(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("arity mismatch: expected {expected} columns, got {got}")]
    ArityMismatch { expected: usize, got: usize },

    #[error("invalid model spec: {0}")]
    InvalidModel(String),

    #[error("model produced a non-finite output at row {row}")]
    NonFiniteOutput { row: usize },

    #[error("subprocess failure: {0}")]
    Subprocess(String),

    #[error("subprocess timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("malformed model response `{0}`")]
    MalformedResponse(String),

    #[error("degenerate treatment: {0}")]
    DegenerateTreatment(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("operation requires a continuous treatment model, got `{0}`")]
    WrongKind(String),

    #[error("balance constraints infeasible: {}", .constraints.join(", "))]
    Infeasible { constraints: Vec<String> },

    #[error("bootstrap unstable: {failed} of {reps} resamples failed")]
    BootstrapUnstable { failed: usize, reps: usize },

    #[error("incompatible reports: {0}")]
    IncompatibleReports(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
