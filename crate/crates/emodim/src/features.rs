//! "EMOF" frame-level feature files.
//!
//! Layout: magic `EMOF`, version u32 (= 1), dim u32, frames u32,
//! frame period in milliseconds as f32, then `frames × dim` f32 values,
//! row-major. Everything little-endian.

use std::path::Path;

use emodim_core::data::FeatureSequence;

use crate::binio::{to_u32, Reader};
use crate::error::{EmodimError, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"EMOF";
pub const VERSION: u32 = 1;
const HEADER_BYTES: usize = 20;

/// Serialize raw frames. Rejects zero-sized or inconsistent headers.
pub fn encode_features(dim: usize, frames: usize, frame_period_ms: f32, data: &[f32]) -> Result<Vec<u8>, FormatError> {
    if dim == 0 || frames == 0 {
        return Err(FormatError::Header(format!("dim {dim} and frames {frames} must both be positive")));
    }
    if !(frame_period_ms > 0.0) {
        return Err(FormatError::Header(format!("frame period {frame_period_ms} must be positive")));
    }
    if data.len() != dim * frames {
        return Err(FormatError::SizeMismatch {
            declared: dim * frames * 4,
            actual: data.len() * 4,
        });
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    out.extend_from_slice(&to_u32(frames, "frames")?.to_le_bytes());
    out.extend_from_slice(&frame_period_ms.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let dim = r.u32()? as usize;
    let frames = r.u32()? as usize;
    let period = r.f32()?;
    if dim == 0 || frames == 0 || !(period > 0.0) {
        return Err(FormatError::Header(format!("dim {dim}, frames {frames}, frame period {period}")));
    }
    let payload = dim
        .checked_mul(frames)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Header("payload size overflows".into()))?;
    let body = r.take(payload)?;
    r.finish()?;
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    FeatureSequence::new(dim, frames, period, data).map_err(|e| FormatError::Header(e.to_string()))
}

pub fn write_feature_file(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let bytes = encode_features(seq.dim(), seq.frames(), seq.frame_period_ms(), seq.data())
        .map_err(|e| EmodimError::format(path, e))?;
    crate::write_bytes(path, &bytes)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).map_err(|e| EmodimError::io(path, e))?;
    decode_features(&bytes).map_err(|e| EmodimError::format(path, e))
}
