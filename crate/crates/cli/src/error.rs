use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Sim(#[from] neqsim::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Runtime(String),

    #[error("{failed} of {total} sweep points failed")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Sim(neqsim::Error::Config(_)) | Self::Sim(neqsim::Error::Aliasing(_)) => 2,
            Self::Partial { .. } => 4,
            _ => 3,
        }
    }
}
