use fusion_core::Error;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    /// A core error attributed to `flag` (or any other context).
    pub fn usage(flag: &str, e: Error) -> Self {
        CliError::Usage(format!("{flag}: {e}"))
    }

    pub fn from_core(context: &str, e: Error) -> Self {
        let msg = format!("{context}: {e}");
        match e {
            Error::Io(_) | Error::Load(_) | Error::Format(_) | Error::Csv(_) | Error::Json(_) => CliError::Io(msg),
            Error::Divergence { .. } => CliError::Numeric(msg),
            _ => CliError::Usage(msg),
        }
    }
}

/// Attaches a context (usually the flag or path) to core results.
pub trait Context<T> {
    fn ctx(self, context: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for fusion_core::Result<T> {
    fn ctx(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::from_core(context, e))
    }
}
