use std::path::Path;

use murmur_autodiff::Tensor;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use murmur_autodiff::StreamKey;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// FNV-1a over the config's canonical byte encoding.
pub fn config_hash(cfg: &ModelConfig) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in config_bytes(cfg) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn config_fields(cfg: &ModelConfig) -> [usize; 11] {
    [
        cfg.layers,
        cfg.heads,
        cfg.head_dim,
        cfg.model_dim,
        cfg.conv_kernel,
        cfg.mlp_expand,
        cfg.n_classes,
        cfg.subsample_channels,
        cfg.max_rel_offset,
        cfg.n_mels,
        cfg.n_frames,
    ]
}

fn config_bytes(cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    for v in config_fields(cfg) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout_p.to_le_bytes());
    out
}

/// Encodes a model as: magic, version, config fields, config hash,
/// parameter count, then per parameter its name, rank, extents and f32 data.
pub fn to_bytes(model: &ModelState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_bytes(&model.config));
    out.extend_from_slice(&config_hash(&model.config).to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &e in p.tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState<f32>> {
    let fail = |m: String| Error::Checkpoint(m);
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(fail("not a model checkpoint".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    let mut f = [0usize; 11];
    for v in f.iter_mut() {
        *v = c.u32()? as usize;
    }
    let dropout_p = f64::from_bits(c.u64()?);
    let config = ModelConfig {
        layers: f[0],
        heads: f[1],
        head_dim: f[2],
        model_dim: f[3],
        conv_kernel: f[4],
        mlp_expand: f[5],
        n_classes: f[6],
        subsample_channels: f[7],
        max_rel_offset: f[8],
        n_mels: f[9],
        n_frames: f[10],
        dropout_p,
    };
    if c.u64()? != config_hash(&config) {
        return Err(fail("config hash mismatch".into()));
    }
    let mut model = ModelState::<f32>::init(config, StreamKey::root(0))?;
    let count = c.u32()? as usize;
    if count != model.params.len() {
        return Err(fail(format!(
            "{count} parameters, architecture has {}",
            model.params.len()
        )));
    }
    for slot in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| fail("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let expected = model.params.get(slot);
        if expected.name != name || expected.tensor.shape() != shape.as_slice() {
            return Err(fail(format!(
                "parameter {slot} is {name} {shape:?}, expected {} {:?}",
                expected.name,
                expected.tensor.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        model.params.get_mut(slot).tensor = Tensor::new(&shape, data)?;
    }
    if c.pos != bytes.len() {
        return Err(fail("trailing bytes after last parameter".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &ModelState<f32>) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelState<f32> {
        let cfg = ModelConfig {
            layers: 2,
            ..ModelConfig::desk()
        };
        ModelState::init(cfg, StreamKey::root(11)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("m.ckpt");
        save_checkpoint(&p, &m).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a
                .tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(to_bytes(&back), to_bytes(&m));
    }

    #[test]
    fn corruption_detected() {
        let bytes = to_bytes(&small());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err());
        // layers field altered without fixing the hash
        let mut bad_cfg = bytes.clone();
        bad_cfg[8] = 3;
        assert!(matches!(from_bytes(&bad_cfg), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn hash_tracks_config() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            dropout_p: 0.2,
            ..a.clone()
        };
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
