use thiserror::Error;

pub type Result<T, E = SrnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SrnError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {what} at {location}")]
    NonFinite { what: String, location: String },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SrnError {
    pub(crate) fn dim(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        SrnError::Dimension {
            context: context.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn non_finite(what: &str, location: impl ToString) -> Self {
        SrnError::NonFinite {
            what: what.to_string(),
            location: location.to_string(),
        }
    }

    pub(crate) fn config(field: &str, reason: impl ToString) -> Self {
        SrnError::InvalidConfig {
            field: field.to_string(),
            reason: reason.to_string(),
        }
    }

    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, SrnError::NonFinite { .. })
    }
}
