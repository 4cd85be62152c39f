//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EqtoxError {
    /// A (theta, dose) pair produced a cell probability outside [0, 1].
    #[error("infeasible model: cell probability {value} at dose {dose} outside [0, 1]")]
    Feasibility { dose: f64, value: f64 },

    /// A target correlation lies outside the attainable range for the given margins.
    #[error("correlation {rho} outside attainable bounds [{lower}, {upper}]")]
    InfeasibleCorrelation { rho: f64, lower: f64, upper: f64 },

    /// An optimizer hit its iteration cap without meeting the first-order tolerance.
    #[error("optimizer failed to converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// The constrained fit could not satisfy the deviation constraint.
    #[error("no parameters found satisfying the deviation constraint (residual {residual:.3e})")]
    ConstraintInfeasible { residual: f64 },

    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    #[error("malformed row at line {line}: {why}")]
    MalformedRow { line: usize, why: String },

    #[error("mixed subject-level and aggregated rows in the same file")]
    MixedSchema,

    #[error("group {group:?} has fewer than 2 distinct doses")]
    EmptyGroup { group: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

impl EqtoxError {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        EqtoxError::Invalid {
            what,
            why: why.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, EqtoxError>;
