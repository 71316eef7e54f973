use std::path::{Path, PathBuf};

use thiserror::Error;

/// What went wrong inside a binary file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("header declares {declared} bytes of payload but {actual} remain")]
    SizeMismatch { declared: usize, actual: usize },
    #[error("invalid header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum EmodimError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("{}:{line}: {source}", path.display())]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{0}")]
    Usage(String),
    #[error("missing feature files:\n  {}", .0.join("\n  "))]
    MissingFeatures(Vec<String>),
    #[error(transparent)]
    Core(#[from] emodim_core::Error),
}

pub type Result<T, E = EmodimError> = std::result::Result<T, E>;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl EmodimError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        EmodimError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        EmodimError::Format { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use emodim_core::Error as C;
        match self {
            EmodimError::Usage(_) => EXIT_USAGE,
            EmodimError::Core(C::NonFinite(_) | C::Diverged { .. }) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}
