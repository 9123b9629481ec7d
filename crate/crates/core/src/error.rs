use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numerical blow-up: non-finite state at step {step}")]
    NumericalBlowUp { step: usize },

    #[error("model shape: {what} returned {got} values, expected {expected}")]
    ModelShape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParameter { key: String, reason: String },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("weight collapse: all particle weights vanished (max log-weight {max_log_weight})")]
    WeightCollapse { max_log_weight: f64 },

    #[error("averaging failed at node {coords:?}: {source}")]
    NodeFailure {
        coords: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("observation step {obs_dt} does not match filter step {filter_dt}")]
    GridMismatch { obs_dt: f64, filter_dt: f64 },

    #[error("too many failed replications at epsilon={epsilon}: {failed} of {total} (first error: {first_error})")]
    TooManyFailures {
        epsilon: f64,
        failed: usize,
        total: usize,
        first_error: String,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics (blow-ups, collapsed weights,
    /// indefinite matrices) as opposed to bad input or IO.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericalBlowUp { .. }
            | Error::NotSymmetric { .. }
            | Error::NotPsd { .. }
            | Error::WeightCollapse { .. }
            | Error::TooManyFailures { .. } => true,
            Error::NodeFailure { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
