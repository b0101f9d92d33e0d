use thiserror::Error;

/// Errors raised across the planning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("control ({v}, {omega}) outside the feasible input set")]
    ControlOutOfBounds { v: f64, omega: f64 },

    #[error("tracking failed: step {step} still collides after {escalations} penalty escalations")]
    InfeasibleTracking { step: usize, escalations: usize },

    #[error("planning failed after {nodes} tree nodes")]
    PlanningFailed { nodes: usize },

    #[error("kernel matrix not positive definite after jitter escalation (jitter {jitter:e})")]
    SingularKernel { jitter: f64 },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("{0}")]
    RoleMismatch(String),

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("parse error in {origin}: {reason}")]
    Parse { origin: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("session error: {0}")]
    Session(String),

    #[error("unknown session `{0}`")]
    UnknownSession(String),

    #[error("stale nonce: feedback targets a candidate that is no longer pending")]
    StaleNonce,

    #[error("session is complete; no candidate is pending")]
    SessionComplete,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
