//! Binary tensor container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MIXF" version count
//! count × { name_len name_utf8 rank dims[rank] f32_le[numel] }
//! ```
//!
//! Values are stored at 32-bit precision. A file written from tensors that
//! were themselves loaded from a file is byte-identical to the original.

use std::path::Path;

use crate::autodiff::{ParamRole, ParamStore};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MIXF";
pub const VERSION: u32 = 1;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&to_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&to_u32(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
        }
        out.reserve(4 * t.numel());
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a MIXF file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let raw = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} overflows")))?;
        let data = r
            .take(raw)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_file(path: impl AsRef<Path>, tensors: &[(&str, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors.iter().copied())?)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}

/// A file holding exactly one tensor, e.g. an input batch or logits.
pub fn read_single(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut tensors = read_file(path)?;
    if tensors.len() != 1 {
        return Err(Error::Format(format!("expected one tensor, found {}", tensors.len())));
    }
    Ok(tensors.remove(0).1)
}

pub fn encode_store(store: &ParamStore) -> Result<Vec<u8>> {
    encode(store.iter().map(|(_, p)| (p.name.as_str(), &p.value)))
}

/// Best guess of a tensor's role from its name. Only used for stores
/// rebuilt from files; values are then copied into a freshly built model.
fn role_of(name: &str) -> ParamRole {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "running_mean" => ParamRole::RunningMean,
        "running_var" => ParamRole::RunningVar,
        "relative_position_bias_table" => ParamRole::Table,
        "bias" | "q_bias" | "v_bias" => ParamRole::Bias,
        _ => ParamRole::Weight,
    }
}

pub fn store_from_tensors(tensors: Vec<(String, Tensor)>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        let role = role_of(&name);
        store.register(name, t, role)?;
    }
    Ok(store)
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_store(&self.store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Loads weights, inferring the configuration from them unless one is given.
    pub fn from_bytes(bytes: &[u8], config: Option<ModelConfig>) -> Result<Self> {
        let store = store_from_tensors(decode(bytes)?)?;
        let config = match config {
            Some(c) => c,
            None => ModelConfig::infer_from(&store)?,
        };
        Model::from_store(config, store)
    }

    pub fn load(path: impl AsRef<Path>, config: Option<ModelConfig>) -> Result<Self> {
        Model::from_bytes(&std::fs::read(path)?, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode([("ab", &t)]).unwrap();
        let mut expected = b"MIXF".to_vec();
        for v in [1u32, 1, 2] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(b"ab");
        for v in [1u32, 2] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let t = Tensor::from_fn(vec![3, 1, 2], |i| (i as f64 * 0.37).sin()).unwrap();
        let s = Tensor::scalar(std::f64::consts::PI);
        let first = encode([("x", &t), ("scalar", &s)]).unwrap();
        let decoded = decode(&first).unwrap();
        assert_eq!(decoded[0].1.shape(), &[3, 1, 2]);
        assert_eq!(decoded[1].1.shape(), &[] as &[usize]);
        let second = encode(decoded.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = Tensor::ones(vec![4]).unwrap();
        let bytes = encode([("w", &t)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(decode(&version).is_err());
    }

    #[test]
    fn model_reload_infers_config() {
        let mut cfg = ModelConfig::micro();
        cfg.block.mode = crate::block::BlockMode::Successive;
        let model = Model::build(cfg, 3).unwrap();
        let bytes = model.to_bytes().unwrap();
        let loaded = Model::from_bytes(&bytes, None).unwrap();
        assert_eq!(loaded.num_params(), model.num_params());
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let bytes = Model::build(ModelConfig::micro(), 0).unwrap().to_bytes().unwrap();
        let mut other = ModelConfig::micro();
        other.blocks[2] = 1;
        assert!(Model::from_bytes(&bytes, Some(other)).is_err());
    }
}
