//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "S2SCKPT\n" | u32 version | u64 meta_len | meta JSON
//! u64 array_count | per array: u32 name_len, name, u8 dtype, u32 ndim, u64 dims[ndim], u64 payload_len, payload
//! 32-byte SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{DType, Float, ParamStore, Tensor};
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"S2SCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Stage that wrote the checkpoint (0 for auxiliary files such as cache entries).
    pub stage: u8,
    /// Updates completed within that stage.
    pub step: u64,
    pub complete: bool,
    pub config: BTreeMap<String, String>,
    pub rng: Option<RngState>,
    /// Update counts of the optimizers whose moments are stored under `opt/{name}/`.
    pub optimizer_steps: BTreeMap<String, u64>,
    /// Per-update training loss of the writing stage.
    pub loss_history: Vec<f64>,
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }
}

impl Checkpoint {
    pub fn new(stage: u8) -> Self {
        Self { meta: CheckpointMeta { format_version: FORMAT_VERSION, stage, ..Default::default() }, arrays: BTreeMap::new() }
    }

    pub fn insert_store(&mut self, store: &ParamStore<f32>) {
        for (name, t) in store.export() {
            self.arrays.insert(name, t);
        }
    }

    pub fn insert_prefixed(&mut self, prefix: &str, arrays: Vec<(String, Tensor<f32>)>) {
        for (name, t) in arrays {
            self.arrays.insert(format!("{prefix}{name}"), t);
        }
    }

    /// Entries whose names start with `prefix`.
    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.arrays.range(prefix.to_string()..).next().is_some_and(|(k, _)| k.starts_with(prefix))
    }

    /// Copies every array under `prefix` from `other`.
    pub fn merge_prefix(&mut self, other: &Checkpoint, prefix: &str) {
        for (k, v) in other.arrays.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.arrays.insert(k.clone(), v.clone());
        }
    }

    /// SHA-256 over the named arrays under `prefix`, matching [`ParamStore::hash_prefix`].
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut store = ParamStore::<f32>::new();
        for (k, v) in self.arrays.iter().filter(|(k, _)| k.starts_with(prefix)) {
            store.add(k.clone(), v.clone()).expect("names are unique");
        }
        store.hash_prefix(prefix)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(64 + meta.len() + self.arrays.values().map(|t| 64 + 4 * t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(<f32 as Float>::DTYPE.code());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.numel() * 4) as u64).to_le_bytes());
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let meta_len = r.len()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.len()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("array name is not UTF-8"))?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| corrupt(format!("{name}: unknown dtype")))?;
            if dtype != DType::F32 {
                return Err(corrupt(format!("{name}: only f32 arrays are supported")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let payload = r.len()?;
            let numel: usize = shape.iter().product();
            if payload != numel * dtype.size() {
                return Err(corrupt(format!("{name}: payload {payload} bytes for shape {shape:?}")));
            }
            let raw = r.take(payload)?;
            let data = raw.chunks_exact(4).map(f32::read_le).collect();
            arrays.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { meta, arrays })
    }

    /// Atomic write through a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|_| Error::Checkpoint(format!("cannot read {}", path.display())))?;
        Self::from_bytes(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e.to_string().trim_start_matches("checkpoint error: "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(2);
        c.meta.step = 7;
        c.meta.loss_history = vec![0.1, 1.0 / 3.0, f64::MIN_POSITIVE];
        c.meta.config.insert("seed".into(), "3".into());
        c.arrays.insert("base/w".into(), Tensor::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0e-39]).unwrap());
        c.arrays.insert("fusion/b".into(), Tensor::new(&[1], vec![f32::MAX]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, c.meta);
        for (k, v) in &c.arrays {
            let b = &back.arrays[k];
            assert_eq!(v.shape(), b.shape());
            assert!(v.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn save_load_and_prefix_helpers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert!(c.has_prefix("base/") && !c.has_prefix("graft/"));
        assert_ne!(c.hash_prefix("base/"), c.hash_prefix("fusion/"));
        assert!(matches!(Checkpoint::load(dir.path().join("missing")), Err(Error::Checkpoint(_))));
    }
}
