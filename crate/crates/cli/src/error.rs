use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    ConfigInvalid(String),
    #[error("{}: {message}", path.display())]
    MissingArtifact { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    UnreadableArtifact { path: PathBuf, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::ConfigInvalid(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::UnreadableArtifact { .. } => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Runtime(_) => "runtime",
            CliError::ConfigInvalid(_) => "config-invalid",
            CliError::MissingArtifact { .. } => "missing-artifact",
            CliError::UnreadableArtifact { .. } => "unreadable-artifact",
        }
    }

    /// Single-line `error kind=... code=... message="..."` for standard error.
    pub fn machine_line(&self) -> String {
        let msg = self.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        format!("error kind={} code={} message=\"{msg}\"", self.kind(), self.exit_code())
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}
