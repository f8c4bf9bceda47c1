use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] fsp_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 success, 2 config error, 3 runtime divergence, 4 IO.
    pub fn exit_code(&self) -> i32 {
        use fsp_core::Error as E;
        match self {
            CliError::Config { .. } => 2,
            CliError::Io { .. } => 4,
            CliError::Core(E::NonFinite(_) | E::NotConverged(_)) => 3,
            CliError::Core(E::Idx(_) | E::Checkpoint(_)) => 4,
            CliError::Core(_) => 2,
        }
    }
}
