use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("dimension error in {context}: {detail}")]
    Dimension { context: String, detail: String },

    #[error("unknown parameter `{0}`")]
    MissingParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("gradient record is stale: the parameter store changed after recording")]
    StaleRecord,

    #[error("mask has {got} entries but the parameter store has {expected} scalars")]
    MaskAlignment { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl AutodiffError {
    pub(crate) fn dim(context: impl Into<String>, detail: impl Into<String>) -> Self {
        AutodiffError::Dimension {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
