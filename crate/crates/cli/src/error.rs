use std::path::PathBuf;
use std::process::ExitCode;

use canopy_fewshot::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("missing upstream artifact {path} (run `{stage}` first)")]
    MissingUpstream { path: PathBuf, stage: &'static str },

    #[error("{0} already exists; pass --force to overwrite")]
    Refused(PathBuf),

    #[error("{0} is locked by another run (remove the lock file if that run is gone)")]
    Locked(PathBuf),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Validation(_) | CliError::MissingUpstream { .. } => 2,
            CliError::Refused(_) | CliError::Locked(_) => 3,
            CliError::Core(e) => match e {
                CoreError::Checkpoint(_) | CoreError::Shape { .. } => 4,
                CoreError::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => 4,
                _ => 2,
            },
            CliError::Internal(_) => 4,
        })
    }
}

pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}
