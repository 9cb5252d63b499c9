use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] mbtc_core::Error),

    #[error("i/o: {0}")]
    Io(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0} check(s) failed")]
    Failed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Core(e) if e.is_numeric() => 4,
            CliError::Core(_) => 3,
            CliError::Failed(_) => 4,
            CliError::Io(_) | CliError::Csv(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            3 => "config",
            4 => "numeric",
            _ => "io",
        }
    }
}
