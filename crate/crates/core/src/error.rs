use thiserror::Error;

use crate::milp::MilpError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{group} group is empty")]
    EmptyGroup { group: &'static str },

    #[error("covariate `{name}` has zero standard deviation")]
    DegenerateCovariate { name: String },

    #[error("degenerate calibration: expected imbalance is zero")]
    DegenerateCalibration,

    #[error("covariate `{name}` is continuous; discretize it first")]
    ContinuousCovariate { name: String },

    #[error("problem too large for exhaustive enumeration: {0}")]
    SizeExceeded(String),

    #[error("node budget exhausted before any feasible assignment was found")]
    BudgetExhausted,

    #[error("no admissible frontier point; refine the lambda grid")]
    NoAdmissiblePoint,

    #[error("csv error at row {row}, column {column}: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    #[error(transparent)]
    Solver(#[from] MilpError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let row = e
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or_default();
        Error::Csv {
            row,
            column: String::new(),
            message: e.to_string(),
        }
    }
}
