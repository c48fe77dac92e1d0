use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] vtomo_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    /// 1 usage, 2 I/O or format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use vtomo_core::Error as C;
        match self {
            Self::Usage(_) => 1,
            Self::Io { .. } | Self::Format { .. } => 2,
            Self::Core(e) => match e {
                C::Diverged { .. } | C::NonFinite(_) => 3,
                C::LengthMismatch { .. } | C::DimMismatch { .. } | C::ShapeMismatch(_) | C::NotBinary(_) => 2,
                _ => 1,
            },
        }
    }
}
