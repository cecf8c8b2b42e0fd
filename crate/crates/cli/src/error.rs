use std::path::PathBuf;

use crossstudy::ErrorClass;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] crossstudy::Error),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid input {path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("output directory {0} exists; pass --force to replace it")]
    RefusedOverwrite(PathBuf),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
            CliError::Io { .. } | CliError::Input { .. } => 3,
            CliError::RefusedOverwrite(_) => 5,
        }
    }
}
