use std::io;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_THRESHOLD: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Core(#[from] harl::Error),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("did not converge: {0}")]
    NotConverged(String),
    #[error("threshold exceeded: {0}")]
    Threshold(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Core(harl::Error::Numerical(_))
            | HarnessError::Core(harl::Error::NoConvergence { .. })
            | HarnessError::NotConverged(_) => EXIT_NUMERICAL,
            HarnessError::Threshold(_) => EXIT_THRESHOLD,
            _ => EXIT_USAGE,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Usage(msg.into()))
}
