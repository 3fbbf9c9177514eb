use std::path::PathBuf;

use adaface_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("output directory {} is not empty; choose a fresh one or pass --overwrite", .0.display())]
    OutputExists(PathBuf),
    #[error("{0}")]
    ChecksFailed(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Diverged { .. }) => EXIT_DIVERGED,
            CliError::Core(Error::Io(_)) | CliError::OutputExists(_) => EXIT_IO,
            CliError::ChecksFailed(_) => EXIT_CHECK_FAILED,
            CliError::Core(_) => EXIT_CONFIG,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
