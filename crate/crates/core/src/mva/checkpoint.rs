//! `EVCK` checkpoints: magic, u32 version, SHA-256 of the model config
//! JSON, the config JSON itself, then length-prefixed named f32 tensors.
//! All integers little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::{ModelConfig, MvaError};
use crate::numerics::Tensor;

pub const CKPT_MAGIC: [u8; 4] = *b"EVCK";
pub const CKPT_VERSION: u32 = 1;

pub fn config_digest(cfg: &ModelConfig) -> Result<[u8; 32], MvaError> {
    let json = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&json).into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), MvaError> {
    let v = u32::try_from(v).map_err(|_| MvaError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(cfg: &ModelConfig, params: &ParamStore<f32>) -> Result<Vec<u8>, MvaError> {
    let json = serde_json::to_vec(cfg)?;
    let mut out = Vec::with_capacity(64 + json.len() + params.scalar_count() * 4);
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&json));
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MvaError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| MvaError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, MvaError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamStore<f32>), MvaError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(MvaError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION as usize {
        return Err(MvaError::Checkpoint(format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let len = r.u32()?;
    let json = r.take(len)?;
    let actual: [u8; 32] = Sha256::digest(json).into();
    if actual != digest {
        return Err(MvaError::Checkpoint("config digest mismatch".into()));
    }
    let cfg: ModelConfig = serde_json::from_slice(json)?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?).map_err(|e| MvaError::Checkpoint(e.to_string()))?.to_string();
        let ndims = r.u32()?;
        let shape = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| MvaError::Checkpoint(format!("'{name}' shape {shape:?} overflows")))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| MvaError::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| MvaError::Checkpoint(format!("'{name}': {e}")))?;
        params.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(MvaError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((cfg, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig, params: &ParamStore<f32>) -> Result<(), MvaError> {
    fs::write(path, encode_checkpoint(cfg, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ParamStore<f32>), MvaError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mva::Phase;

    #[test]
    fn round_trip_and_corruption() {
        let cfg = ModelConfig { enc_depth: 1, dec_depth: 1, ..ModelConfig::default() };
        let p = ParamStore::<f32>::init(&cfg, Phase::Pretrain, 5).unwrap();
        let bytes = encode_checkpoint(&cfg, &p).unwrap();
        let (cfg2, p2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(p2, p);
        assert_eq!(encode_checkpoint(&cfg2, &p2).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4 + 4 + 32 + 4 + 2] ^= 1;
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}
