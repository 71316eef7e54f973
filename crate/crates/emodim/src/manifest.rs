//! JSON-lines manifests and resolution of feature streams to files.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use emodim_core::data::{fuse_streams, validate_manifest, Dataset, FeatureSequence, Split, UtteranceRecord};

use crate::error::{EmodimError, Result};
use crate::features::read_feature_file;

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| EmodimError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EmodimError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| EmodimError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        records.push(rec);
    }
    validate_manifest(&records)?;
    Ok(records)
}

pub fn encode_manifest(records: &[UtteranceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    crate::write_bytes(path, encode_manifest(records).as_bytes())
}

/// Which feature files feed a model: one stream, or several fused frame-wise.
///
/// Each component is either the name of a directory that appears in the
/// records' `feature_paths` (e.g. `mfb` matches `mfb/utt1.emof`), or a
/// directory holding `<id>.emof` files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamSpec {
    pub components: Vec<String>,
}

impl StreamSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let components: Vec<String> = match s.strip_prefix("fused:") {
            Some(rest) => rest.split(',').map(|c| c.trim().to_string()).collect(),
            None => vec![s.to_string()],
        };
        if components.iter().any(String::is_empty) {
            return Err(EmodimError::Usage(format!("empty feature stream in `{s}`")));
        }
        if s.starts_with("fused:") && components.len() < 2 {
            return Err(EmodimError::Usage(format!("`{s}` fuses fewer than 2 streams")));
        }
        Ok(StreamSpec { components })
    }

    pub fn as_string(&self) -> String {
        match self.components.as_slice() {
            [one] => one.clone(),
            many => format!("fused:{}", many.join(",")),
        }
    }

    /// File path of each component for one record.
    ///
    /// A component naming the parent directory of a listed feature path uses
    /// that path. Any other component is a directory, relative to the
    /// manifest unless absolute, holding `<id>.emof`.
    pub fn resolve(&self, manifest_dir: &Path, rec: &UtteranceRecord) -> Vec<PathBuf> {
        self.components
            .iter()
            .map(|c| {
                let listed = rec.feature_paths.iter().find(|p| {
                    Path::new(p)
                        .parent()
                        .and_then(|d| d.file_name())
                        .is_some_and(|d| d == c.as_str())
                });
                match listed {
                    Some(p) => manifest_dir.join(p),
                    None => manifest_dir.join(c).join(format!("{}.emof", rec.id)),
                }
            })
            .collect()
    }
}

/// Worker count for read-only parallel sections, from `EMODIM_THREADS`.
pub fn thread_count() -> usize {
    std::env::var("EMODIM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load_one(paths: &[PathBuf]) -> Result<FeatureSequence> {
    let seqs = paths.iter().map(|p| read_feature_file(p)).collect::<Result<Vec<_>>>()?;
    Ok(match seqs.len() {
        1 => seqs.into_iter().next().expect("one stream"),
        _ => fuse_streams(&seqs)?,
    })
}

/// Load every record of `split` with features from `spec`.
///
/// All missing files are listed together before anything is decoded.
pub fn load_split(manifest_path: &Path, records: &[UtteranceRecord], split: Split, spec: &StreamSpec) -> Result<Dataset> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let chosen: Vec<&UtteranceRecord> = records.iter().filter(|r| r.split == split).collect();
    let paths: Vec<Vec<PathBuf>> = chosen.iter().map(|r| spec.resolve(dir, r)).collect();
    let missing: Vec<String> = paths.iter().flatten().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(EmodimError::MissingFeatures(missing));
    }
    let threads = thread_count().min(paths.len()).max(1);
    let chunk = paths.len().div_ceil(threads).max(1);
    let loaded: Vec<Result<Vec<FeatureSequence>>> = std::thread::scope(|s| {
        let handles: Vec<_> = paths
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|p| load_one(p)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("feature loader panicked")).collect()
    });
    let mut features = Vec::with_capacity(chosen.len());
    for part in loaded {
        features.extend(part?);
    }
    Ok(Dataset::from_records(&chosen, features)?)
}
