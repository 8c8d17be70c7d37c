use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    /// A precondition on the amount of data failed; the message names it.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    /// Design matrix columns that are linear combinations of earlier ones.
    #[error("rank-deficient design: collinear columns {0:?}")]
    RankDeficient(Vec<String>),
}

pub type Result<T> = std::result::Result<T, StatsError>;

pub(crate) fn insufficient<T>(msg: impl Into<String>) -> Result<T> {
    Err(StatsError::InsufficientData(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(StatsError::Invalid(msg.into()))
}
