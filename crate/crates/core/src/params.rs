//! Named trainable tensors, their gradient accumulators and checkpoints.
//!
//! A checkpoint is a directory with one raw little-endian `f32` file per
//! parameter and a `manifest.json` mapping each name to its shape and file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    grad: Vec<T>,
}

#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        let grad = vec![T::zero(); value.numel()];
        self.entries.push(Entry { name, value, grad });
        Ok(id)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_fan_in<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)));
        self.insert(name, t)
    }

    pub fn insert_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)));
        self.insert(name, t)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Add the gradients recorded on `tape` for this store's parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for id in tape.params_used(self) {
            let var = tape.param_var(self, id).expect("listed as used");
            if let Some(g) = tape.grad_slice(var) {
                let dst = &mut self.entries[id.0].grad;
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [T], &[T]) {
        let e = &mut self.entries[id.0];
        (e.value.data_mut(), &e.grad)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Write this store as a checkpoint directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &[self])
    }

    /// Overwrite the values of this store from a checkpoint directory.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        load_checkpoint(dir, &mut [self])
    }
}

/// Write the parameters of all `stores` into `dir`: one raw little-endian
/// `f32` file per tensor, named after the parameter, plus `manifest.json`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, stores: &[&ParamStore<T>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest { params: Vec::new() };
    for store in stores {
        for e in &store.entries {
            let file = format!("{}.bin", e.name);
            let mut bytes = Vec::with_capacity(e.value.numel() * 4);
            for v in e.value.data() {
                bytes.extend_from_slice(&v.as_f32().to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            manifest.params.push(ManifestEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                file,
            });
        }
    }
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Fill every store from `dir`. Each parameter must be present with the
/// same shape; extra entries in the checkpoint are ignored.
pub fn load_checkpoint<T: Scalar>(dir: &Path, stores: &mut [&mut ParamStore<T>]) -> Result<()> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let by_name: BTreeMap<&str, &ManifestEntry> =
        manifest.params.iter().map(|p| (p.name.as_str(), p)).collect();
    for store in stores.iter_mut() {
        for e in &mut store.entries {
            let m = by_name
                .get(e.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", e.name)))?;
            if m.shape != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    e.name,
                    m.shape,
                    e.value.shape()
                )));
            }
            let bytes = fs::read(dir.join(&m.file))?;
            if bytes.len() != e.value.numel() * 4 {
                return Err(Error::Checkpoint(format!("truncated file for {}", e.name)));
            }
            for (v, chunk) in e.value.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                let f = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                *v = T::of(f as f64);
            }
        }
    }
    Ok(())
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::<f32>::new();
        s.insert_fan_in("w", &[3, 2, 3, 3], 18, &mut rng).unwrap();
        s.insert_normal("adj", &[4, 4], 0.01, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let mut t = s.clone();
        for id in t.ids().collect::<Vec<_>>() {
            t.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        t.load(dir.path()).unwrap();
        assert_eq!(s.fingerprint(), t.fingerprint());
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest.params[0].shape, vec![3, 2, 3, 3]);
        let raw = std::fs::read(dir.path().join(&manifest.params[1].file)).unwrap();
        assert_eq!(raw.len(), 16 * 4);
        let first = f32::from_le_bytes(raw[0..4].try_into().unwrap());
        assert_eq!(first, s.value(ParamId(1)).data()[0]);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.insert("w", Tensor::zeros(&[4])).unwrap();
        assert!(matches!(other.load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
