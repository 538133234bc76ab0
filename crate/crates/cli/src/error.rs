use std::path::PathBuf;

use thiserror::Error;

use crate::avf::AvfError;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: AvfError,
    },

    #[error("{}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },

    #[error("no heatmap for sample {0}")]
    MissingSample(usize),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: avin_core::Error,
    },

    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// Process exit code: 2 usage, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core { source, .. } if source.is_numeric() => 4,
            CliError::Core {
                source: avin_core::Error::InvalidConfig(_),
                ..
            } => 2,
            CliError::CheckFailed(_) => 4,
            _ => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>) -> impl FnOnce(AvfError) -> CliError {
        let path = path.into();
        move |source| match source {
            AvfError::Io(source) => CliError::Io { path, source },
            source => CliError::Format { path, source },
        }
    }
}

/// Attaches a description of the failing step to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for avin_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Core {
            context: what(),
            source,
        })
    }
}
