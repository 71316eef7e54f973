//! "EMOT" teacher caches.
//!
//! Layout: magic `EMOT`, version u32, embedding width u32, record count u32,
//! then per record: id (u32 length + UTF-8), `width` f64 embedding values,
//! 3 f64 teacher scores, f64 γ. Records are written in id order.

use std::path::Path;

use emodim_core::training::{TeacherCache, TeacherEntry};

use crate::binio::{put_f64s, put_str, put_u32, to_u32, Reader};
use crate::error::{EmodimError, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"EMOT";
pub const VERSION: u32 = 1;

pub fn encode_cache(cache: &TeacherCache) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(cache.dim(), "embedding width")?);
    put_u32(&mut out, to_u32(cache.len(), "record count")?);
    for (id, e) in cache.iter() {
        put_str(&mut out, id);
        put_f64s(&mut out, &e.embedding);
        put_f64s(&mut out, &e.scores);
        put_f64s(&mut out, &[e.gamma]);
    }
    Ok(out)
}

pub fn decode_cache(bytes: &[u8]) -> Result<TeacherCache, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let dim = r.u32()? as usize;
    let count = r.u32()?;
    let mut cache = TeacherCache::new(dim);
    for _ in 0..count {
        let id = r.string()?;
        let embedding = r.f64s(dim)?;
        let s = r.f64s(3)?;
        let gamma = r.f64()?;
        let entry = TeacherEntry {
            embedding,
            scores: [s[0], s[1], s[2]],
            gamma,
        };
        cache.insert(id, entry).map_err(|e| FormatError::Header(e.to_string()))?;
    }
    r.finish()?;
    Ok(cache)
}

pub fn write_teacher_cache(path: &Path, cache: &TeacherCache) -> Result<()> {
    let bytes = encode_cache(cache).map_err(|e| EmodimError::format(path, e))?;
    crate::write_bytes(path, &bytes)
}

pub fn read_teacher_cache(path: &Path) -> Result<TeacherCache> {
    let bytes = std::fs::read(path).map_err(|e| EmodimError::io(path, e))?;
    decode_cache(&bytes).map_err(|e| EmodimError::format(path, e))
}
