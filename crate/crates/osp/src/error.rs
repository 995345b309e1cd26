use std::path::PathBuf;

use crate::container::ContainerError;

#[derive(Debug, thiserror::Error)]
pub enum OspError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Container {
        path: PathBuf,
        #[source]
        source: ContainerError,
    },
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] osp_core::Error),
    #[error("training diverged at epoch {epoch}, step {step}; last finite checkpoint kept")]
    Divergence { epoch: usize, step: usize },
    #[error("verification failed: {0}")]
    Verification(String),
}

pub type Result<T> = std::result::Result<T, OspError>;

impl OspError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Io { .. } | Self::Container { .. } | Self::Data(_) => 3,
            Self::Core(e) => match e {
                osp_core::Error::Config(_) => 2,
                osp_core::Error::Numeric(_) => 4,
                _ => 3,
            },
            Self::Divergence { .. } => 4,
            Self::Verification(_) => 5,
        }
    }
}

macro_rules! usage {
    ($($arg:tt)*) => {
        return Err($crate::error::OspError::Usage(format!($($arg)*)))
    };
}
pub(crate) use usage;
