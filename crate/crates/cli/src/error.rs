//! CLI error type and its mapping to process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Library(#[from] twisted_smc::Error),
}

impl CliError {
    /// 2 for bad configuration or input files, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use twisted_smc::Error as E;
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Library(E::InvalidParameter(_) | E::ShapeMismatch(_) | E::Dataset(_)) => 2,
            CliError::Library(_) => 3,
        }
    }
}
