use std::path::PathBuf;

use xva_core::deep_bsde::BsdeError;
use xva_core::initial_margin::ImError;
use xva_core::reference::ReferenceError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing prerequisite: {}", .0.display())]
    Missing(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<BsdeError> for CliError {
    fn from(e: BsdeError) -> Self {
        match e {
            BsdeError::Config(m) => CliError::Config(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<ImError> for CliError {
    fn from(e: ImError) -> Self {
        match e {
            ImError::Config(m) => CliError::Config(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<ReferenceError> for CliError {
    fn from(e: ReferenceError) -> Self {
        match e {
            ReferenceError::Config(m) => CliError::Config(m),
            ReferenceError::Bsde(b) => b.into(),
            ReferenceError::Margin(m) => m.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}
