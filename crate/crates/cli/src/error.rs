use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] nlran::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{failed} of {total} scans failed")]
    PartialFailure { failed: usize, total: usize },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use nlran::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(E::Config(_) | E::Capability(_)) => EXIT_USAGE,
            CliError::Core(E::Numeric(_)) => EXIT_NUMERIC,
            CliError::Core(_) | CliError::Io(_) | CliError::Json(_) | CliError::PartialFailure { .. } => EXIT_DATA,
        }
    }
}
