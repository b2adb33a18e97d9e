use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngStream;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
    trainable: bool,
}

/// Named parameter arrays with per-entry trainable flags.
///
/// Names are stable identifiers (`base/down0/conv1/w`), used verbatim as
/// checkpoint keys. Entries keep insertion order; hashing and iteration in
/// name order go through [`ParamStore::names_sorted`].
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Clone for ParamStore<T> {
    /// Deep copy with a fresh identity.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: Arc::new((*e.value).clone()), trainable: e.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed), entries: Vec::new(), index: BTreeMap::new() }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        self.entries.push(Entry { name, value: Arc::new(value), trainable: true });
        Ok(id)
    }

    /// Centered uniform init in `±1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut RngStream,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of_f64(rng.uniform_in(-bound, bound))).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; copies on write if a live graph still holds the value.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn names_sorted(&self) -> impl Iterator<Item = (&str, ParamId)> + '_ {
        self.index.iter().map(|(k, &v)| (k.as_str(), ParamId(v)))
    }

    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.value.numel()).sum()
    }

    /// SHA-256 over `(name, shape, little-endian payload)` of every entry under `prefix`, in name order.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, id) in self.names_sorted().filter(|(n, _)| n.starts_with(prefix)) {
            let t = self.get(id);
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex(&h.finalize())
    }

    /// Overwrite every entry of `self` under `dst_prefix` with the same-suffix entry of `src`
    /// under `src_prefix`. Returns the number of copied arrays.
    pub fn copy_values_from(&mut self, src: &ParamStore<T>, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let targets: Vec<(String, ParamId)> = self
            .names_sorted()
            .filter(|(n, _)| n.starts_with(dst_prefix))
            .map(|(n, id)| (n.to_string(), id))
            .collect();
        for (name, dst) in &targets {
            let src_name = format!("{src_prefix}{}", &name[dst_prefix.len()..]);
            let value = src
                .get_by_name(&src_name)
                .ok_or_else(|| Error::InvalidArgument(format!("no source parameter {src_name} for {name}")))?;
            self.set(*dst, value.clone())?;
        }
        Ok(targets.len())
    }

    /// Flatten into `(name, tensor)` pairs for serialization.
    pub fn export(&self) -> Vec<(String, Tensor<T>)> {
        self.names_sorted().map(|(n, id)| (n.to_string(), self.get(id).clone())).collect()
    }

    /// Overwrite values from `(name, tensor)` pairs; every stored entry must be provided.
    pub fn import(&mut self, arrays: &BTreeMap<String, Tensor<T>>, prefix: &str) -> Result<()> {
        for i in 0..self.entries.len() {
            let key = format!("{prefix}{}", self.entries[i].name);
            let t = arrays
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter array {key}")))?;
            self.set(ParamId(i), t.clone())?;
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
