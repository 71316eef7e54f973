//! File formats, pipelines and command line for dimensional speech-emotion
//! training on top of `emodim-core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod features;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod teacher;

mod binio;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use error::{EmodimError, FormatError, Result};

/// Write a file, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| EmodimError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| EmodimError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("config types always serialize");
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| EmodimError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| EmodimError::Json {
        path: path.to_path_buf(),
        line: source.line(),
        source,
    })
}
