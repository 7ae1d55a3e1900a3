use thiserror::Error;

/// Errors produced by the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training stalled: {0}")]
    Stalled(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("assumption not satisfied: {0}")]
    Assumption(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::InvalidParameter(_) | Error::Dimension(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
