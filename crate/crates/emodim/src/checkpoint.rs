//! "EMOW" parameter checkpoints and their JSON sidecar.
//!
//! Layout: magic `EMOW`, version u32, tensor count u32, then per tensor the
//! name (u32 length + UTF-8), rank u32, one u32 per dim, and row-major f64
//! values. All tensors here are matrices, so rank is written as 2; rank-1
//! tensors are accepted on read as single rows.

use std::path::{Path, PathBuf};

use emodim_core::model::{EmotionModel, ModelConfig};
use emodim_core::nnstack::ParamSet;
use emodim_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f64s, put_str, put_u32, to_u32, Reader};
use crate::error::{EmodimError, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"EMOW";
pub const VERSION: u32 = 1;

pub fn encode_params(params: &ParamSet) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(12 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(params.len(), "tensor count")?);
    for (name, m) in params.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, 2);
        put_u32(&mut out, to_u32(m.rows(), "rows")?);
        put_u32(&mut out, to_u32(m.cols(), "cols")?);
        put_f64s(&mut out, m.as_slice());
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let (rows, cols) = match r.u32()? {
            1 => (1, r.u32()? as usize),
            2 => (r.u32()? as usize, r.u32()? as usize),
            k => return Err(FormatError::Header(format!("tensor {name:?} has unsupported rank {k}"))),
        };
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| FormatError::Header(format!("tensor {name:?} size overflows")))?;
        let data = r.f64s(n)?;
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| FormatError::Header(e.to_string()))?;
        params.push(name, m).map_err(|e| FormatError::Header(e.to_string()))?;
    }
    r.finish()?;
    Ok(params)
}

/// Everything needed besides the weights to rebuild and feed a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Feature stream spec the model was trained on, e.g. `mfb` or `fused:embed,embed2`.
    pub features: String,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn save_checkpoint(path: &Path, model: &EmotionModel, features: &str) -> Result<()> {
    let bytes = encode_params(model.params()).map_err(|e| EmodimError::format(path, e))?;
    crate::write_bytes(path, &bytes)?;
    let meta = CheckpointMeta {
        model: model.config().clone(),
        features: features.to_string(),
    };
    crate::write_json(&sidecar_path(path), &meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(EmotionModel, CheckpointMeta)> {
    let meta: CheckpointMeta = crate::read_json(&sidecar_path(path))?;
    let bytes = std::fs::read(path).map_err(|e| EmodimError::io(path, e))?;
    let params = decode_params(&bytes).map_err(|e| EmodimError::format(path, e))?;
    let model = EmotionModel::from_params(meta.model.clone(), params)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_tensors_read_as_rows() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        put_u32(&mut bytes, 1);
        put_u32(&mut bytes, 1);
        put_str(&mut bytes, "bias");
        put_u32(&mut bytes, 1);
        put_u32(&mut bytes, 3);
        put_f64s(&mut bytes, &[1.0, 2.0, 3.0]);
        let p = decode_params(&bytes).unwrap();
        assert_eq!(p.get(0), &Matrix::row_vector(&[1.0, 2.0, 3.0]));
        assert!(matches!(decode_params(&bytes[..bytes.len() - 3]), Err(FormatError::Truncated { .. })));
    }
}
