use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures that map to dedicated exit codes. Anything else exits with 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("missing input {}", path.display())]
    MissingInput { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn input(path: &Path, source: std::io::Error) -> Self {
        CliError::MissingInput { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Schema { .. } => 2,
            CliError::MissingInput { .. } => 3,
        }
    }
}

/// Exit code of a failed run.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain().find_map(|e| e.downcast_ref::<CliError>()).map_or(1, CliError::exit_code)
}
