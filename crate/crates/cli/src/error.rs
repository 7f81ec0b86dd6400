use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// A config value failed validation; `field` is its dotted path.
    #[error("{field}: {msg}")]
    Config { field: String, msg: String },
    #[error("{path}: {msg}")]
    ConfigSyntax { path: PathBuf, msg: String },
    #[error("missing input file {path}")]
    MissingInput { path: PathBuf },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sweep cell {cell} failed: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<CliError>,
    },
    #[error(transparent)]
    Core(#[from] ibloss::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Write {
            path: path.into(),
            source,
        }
    }

    pub fn is_validation(&self) -> bool {
        match self {
            CliError::Config { .. }
            | CliError::ConfigSyntax { .. }
            | CliError::MissingInput { .. } => true,
            CliError::Write { .. } => false,
            CliError::Cell { source, .. } => source.is_validation(),
            CliError::Core(e) => e.is_validation(),
        }
    }

    /// 1 for rejected input, 2 for runtime or numerical failures.
    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            1
        } else {
            2
        }
    }
}
