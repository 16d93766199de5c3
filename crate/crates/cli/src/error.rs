use mbll_core::MbllError;
use serde::Serialize;
use thiserror::Error;

/// Exit code for configuration, input and dimension errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for numerical aborts.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] MbllError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

#[derive(Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) | CliError::Io(_) => "input",
            CliError::Core(e) => match e {
                MbllError::NotPositiveDefinite { .. }
                | MbllError::IllConditioned { .. }
                | MbllError::Diverged { .. }
                | MbllError::NonFinite(_)
                | MbllError::RankDeficient(_) => "numerical",
                _ => "input",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.kind() == "numerical" {
            EXIT_NUMERICAL
        } else {
            EXIT_CONFIG
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport { error: self.kind(), message: self.to_string(), exit_code: self.exit_code() }
    }
}
