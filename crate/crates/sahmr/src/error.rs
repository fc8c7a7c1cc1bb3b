use std::path::PathBuf;

use sahmr_core::Error as CoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input {}", .0.display())]
    Missing(PathBuf),
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Process exit code: 2 for configuration and usage problems, 3 for
    /// missing or unreadable inputs, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format { .. } => 2,
            Error::Missing(_) | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Core(e) => match e {
                CoreError::InvalidConfig(_) | CoreError::UnknownScenario(_) => 2,
                CoreError::MissingCheckpoint(_) => 3,
                _ => 4,
            },
        }
    }
}
