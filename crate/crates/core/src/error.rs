use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MgcpError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("covariance not positive definite after {attempts} jitter escalations (last jitter {jitter:e})")]
    IndefiniteCovariance { attempts: usize, jitter: f64 },

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("bandwidth error: {0}")]
    Bandwidth(String),

    #[error("domain specification error: {0}")]
    Domain(String),

    #[error("prediction combination error: {0}")]
    Combination(String),

    #[error("optimization failed in all {restarts} restarts: {}", .messages.join("; "))]
    OptimizationFailed {
        restarts: usize,
        messages: Vec<String>,
    },
}

impl MgcpError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = MgcpError> = std::result::Result<T, E>;
