use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("estimator budget exhausted: relative CI half-width {achieved:.3e} exceeds {requested:.3e} at {samples} samples")]
    EstimatorBudget {
        requested: f64,
        achieved: f64,
        samples: usize,
    },

    #[error("root solver did not converge: {0}")]
    NonConvergence(String),

    #[error("argument {value} outside the domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("constraint curve is unbounded at {0}")]
    Unbounded(f64),

    #[error("target exponent {target} is not below the maximum exponent {max}")]
    OutOfRange { target: f64, max: f64 },

    #[error("search bracket too small: best rate found at the upper bound {upper}")]
    BracketTooSmall { upper: f64 },

    #[error("two-hop solver: {0}")]
    Solver(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
