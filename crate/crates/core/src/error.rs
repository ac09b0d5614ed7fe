use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CtoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CtoError {
    #[error("variable `{variable}` = {value} is outside [{lower}, {upper}]")]
    Range {
        variable: String,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("output column `{column}` has zero variance")]
    DegenerateOutput { column: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("hyperparameter fit failed: {0}")]
    Fit(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("chain initialization failed: {0}")]
    Init(String),

    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    #[error("model evaluation produced a non-finite output at {point:?}")]
    Evaluation { point: Vec<f64> },

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Ingestion {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CtoError {
    pub(crate) fn shape(what: impl Into<String>, expected: usize, found: usize) -> Self {
        CtoError::Shape {
            what: what.into(),
            expected,
            found,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CtoError::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
