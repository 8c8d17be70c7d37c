use lesionkit_stats::StatsError;
use thiserror::Error;

/// Failures mapped onto the process exit-code contract.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration. Exit 64.
    #[error("usage error: {0}")]
    Usage(String),
    /// Backend, filesystem or scorer environment failure. Exit 2.
    #[error("environment error: {0}")]
    Environment(String),
    /// A data precondition failed; the message names it. Exit 3.
    #[error("insufficient data: {0}")]
    Insufficient(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Environment(_) => 2,
            CliError::Insufficient(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<lesionkit::Error> for CliError {
    fn from(e: lesionkit::Error) -> Self {
        use lesionkit::Error as E;
        match e {
            E::Io(_) | E::Checksum { .. } | E::Scorer(_) | E::Generation(_) => CliError::Environment(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Invalid(_) => CliError::Usage(e.to_string()),
            StatsError::InsufficientData(_) | StatsError::RankDeficient(_) => CliError::Insufficient(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Environment(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Environment(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}
