use thiserror::Error;

/// Failures by exit code: usage 1, validation 2, runtime 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<emogate::Error> for CliError {
    fn from(e: emogate::Error) -> Self {
        use emogate::Error as E;
        match e {
            E::Invalid { .. } | E::UnknownDomain(_) | E::Format { .. } | E::Bundle { .. } => {
                CliError::Validation(e.to_string())
            }
            E::Tensor(_) | E::Io { .. } | E::NonFiniteLoss { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
