use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Missing or unparsable input files.
    #[error("{0}")]
    Input(String),
    /// Inputs parse but are inconsistent (bad pipeline, override, kdb).
    #[error("{0}")]
    Validation(String),
    #[error("strict replay failed: {0}")]
    StrictReplay(String),
    #[error("{0}")]
    Output(String),
    #[error("service error: {0}")]
    Service(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Validation(_) => 3,
            CliError::StrictReplay(_) => 4,
            CliError::Output(_) | CliError::Service(_) | CliError::Io(_) => 1,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input_error",
            CliError::Validation(_) => "validation_error",
            CliError::StrictReplay(_) => "strict_replay_failed",
            CliError::Output(_) => "output_error",
            CliError::Service(_) => "service_error",
            CliError::Io(_) => "io_error",
        }
    }
}
