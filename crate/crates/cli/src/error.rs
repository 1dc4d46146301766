use std::path::Path;

use distillrec_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code for this error's category.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Data(_) => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::Io(_) => 3,
                CoreError::Parse { .. }
                | CoreError::Empty(_)
                | CoreError::Invalid(_)
                | CoreError::Teacher(_)
                | CoreError::Json(_) => 4,
                CoreError::Diverged { .. } => 5,
                CoreError::Autodiff(_) => 1,
            },
        }
    }
}
