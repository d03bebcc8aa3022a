use thiserror::Error;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "kernel truncation order {order} leaves a certified tail of {tail:e}, above the tolerance {tolerance:e}"
    )]
    TruncationInsufficient {
        order: usize,
        tail: f64,
        tolerance: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at t = {time}, cell {cell}")]
    NonFinite { time: f64, cell: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("value {value} at index {index} is not strictly positive")]
    NonPositive { index: usize, value: f64 },

    #[error("time {time} lies outside the recorded horizon [0, {horizon}]")]
    Horizon { time: f64, horizon: f64 },

    #[error("insufficient ensemble: need at least {needed} trajectories, got {got}")]
    InsufficientEnsemble { needed: usize, got: usize },

    #[error("Picard iterate {iteration} exceeded the ceiling {ceiling:e}")]
    Divergence { iteration: usize, ceiling: f64 },

    #[error("sigma: {0}")]
    Sigma(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with any context layers stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NonFinite { .. }
                | Error::Divergence { .. }
                | Error::Quadrature(_)
                | Error::NonPositive { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
