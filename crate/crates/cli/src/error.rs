use std::path::Path;

use latentlab::graph::GraphError;
use latentlab::ident::IdentError;
use latentlab::locate::LocateError;
use latentlab::mae::MaeError;
use latentlab::scm::ScmError;
use thiserror::Error;

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Bad flags or arguments.
pub const EXIT_USAGE: i32 = 1;
/// Unreadable, invalid or inconsistent data, including failed checks.
pub const EXIT_DATA: i32 = 2;
/// Divergence or a failed linear solve.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Locate(#[from] LocateError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Mae(#[from] MaeError),
    #[error(transparent)]
    Ident(#[from] IdentError),
    #[error("{0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Mae(MaeError::Diverged { .. }) | CliError::Ident(IdentError::Numerical(_)) => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
