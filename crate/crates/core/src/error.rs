use thiserror::Error;

/// Errors raised by the solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    #[error("under-resolved geometry: {0}")]
    Resolution(String),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    LinearSolver { iterations: usize, residual: f64 },

    #[error("Newton iteration did not converge after {iterations} iterations; residual history {history:?}")]
    Newton { iterations: usize, history: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("non-finite value encountered at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// Wraps the error with a short description of the failing stage.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
