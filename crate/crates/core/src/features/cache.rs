use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureMap, SegmentFeatures, N_FRAMES, N_MELS};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: [u8; 4] = *b"MMFC";
pub const CACHE_VERSION: u32 = 1;

/// Writes one recording's segment features.
///
/// Layout (little-endian): magic, version, mel bins, frames, segment count,
/// then per segment its offset (f64) and the Mel-major f32 matrix.
pub fn write_feature_cache(path: &Path, segments: &[SegmentFeatures]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&CACHE_MAGIC)?;
    put(&CACHE_VERSION.to_le_bytes())?;
    put(&(N_MELS as u32).to_le_bytes())?;
    put(&(N_FRAMES as u32).to_le_bytes())?;
    put(&(segments.len() as u32).to_le_bytes())?;
    for s in segments {
        put(&s.offset_s.to_le_bytes())?;
        let mut bytes = Vec::with_capacity(s.map.values().len() * 4);
        for v in s.map.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        put(&bytes)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<Vec<SegmentFeatures>> {
    let bad = |msg: String| Error::FeatureCache {
        path: path.to_path_buf(),
        msg,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)
            .map_err(|_| bad("truncated file".into()))?;
        Ok(buf)
    };
    let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap());
    if take(4)? != CACHE_MAGIC {
        return Err(bad("not a feature cache".into()));
    }
    let version = u32_at(take(4)?);
    if version != CACHE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (mels, frames) = (u32_at(take(4)?) as usize, u32_at(take(4)?) as usize);
    if (mels, frames) != (N_MELS, N_FRAMES) {
        return Err(bad(format!(
            "shape {mels}x{frames}, expected {N_MELS}x{N_FRAMES}"
        )));
    }
    let count = u32_at(take(4)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let offset_s = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let values = take(mels * frames * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let map = FeatureMap::new(values).map_err(|e| bad(e.to_string()))?;
        out.push(SegmentFeatures { offset_s, map });
    }
    if !take(1).is_err() {
        return Err(bad("trailing bytes".into()));
    }
    Ok(out)
}
