use fade_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, FadeError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FadeError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid world configuration: {0}")]
    InvalidWorld(String),

    #[error("unknown label: {0}")]
    UnknownLabel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("sampling diverged at step {step}")]
    Divergence { step: usize },

    #[error("training diverged at step {step}: {what}")]
    TrainingDiverged { step: usize, what: String },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("outcome {0} has zero probability under both classes")]
    DegenerateSupport(usize),

    #[error("inconsistent report: {0}")]
    InconsistentReport(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> FadeError {
    FadeError::InvalidArgument(msg.into())
}
