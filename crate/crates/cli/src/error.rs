use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] rkrom_core::Error),

    #[error("provenance error: {0}")]
    Provenance(String),

    /// Some units of work failed; everything else was written.
    #[error("{failed} of {total} {what} failed; see the .failed markers")]
    Partial { what: &'static str, failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 1 IO, 2 config, 3 numeric failure, 4 provenance.
    pub fn exit_code(&self) -> i32 {
        use rkrom_core::Error as E;
        match self {
            CliError::Io { .. } | CliError::MissingInput(_) => 1,
            CliError::Config(_) => 2,
            CliError::Core(E::Config(_) | E::InvalidModel(_) | E::Usage(_)) => 2,
            CliError::Core(_) | CliError::Partial { .. } => 3,
            CliError::Provenance(_) => 4,
        }
    }
}
