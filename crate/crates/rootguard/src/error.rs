use thiserror::Error;

/// Crate-wide error type. Variant names follow the contract surface:
/// domain/index violations from the grid layer, config and solver failures
/// from the allocator, protocol errors from the session controller, and
/// schema/parse errors from CSV ingestion.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside domain [{lower}, {upper}]")]
    Domain { value: f64, lower: f64, upper: f64 },

    #[error("index {index} outside grid [0, {max}]")]
    Index { index: f64, max: f64 },

    #[error("evaluation failed for root '{root}': {reason}")]
    Evaluation { root: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("solver did not converge: residual {residual}")]
    Solver { residual: f64 },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("bad request: {0}")]
    Request(String),

    #[error("CSV schema error: missing column '{column}'")]
    Schema { column: String },

    #[error("CSV parse error at row {row}, column '{column}': {reason}")]
    Parse {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
