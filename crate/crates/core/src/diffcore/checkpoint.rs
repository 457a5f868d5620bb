//! Checkpoint directory: `manifest.json` plus `weights.bin` holding every
//! parameter as little-endian `f32`, concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::params::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub stage: u8,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
    /// Free-form model description (e.g. the detector configuration).
    #[serde(default)]
    pub model: serde_json::Value,
}

pub fn save<T: Scalar>(
    dir: &Path,
    store: &ParamStore<T>,
    stage: u8,
    seed: u64,
    epoch: usize,
    model: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: bytes.len(),
            trainable: p.trainable,
        });
        for &v in p.value.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        dtype: "f32".into(),
        stage,
        seed,
        epoch,
        params,
        model,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    fs::write(dir.join(MANIFEST_FILE), json).map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;
    fs::write(dir.join(WEIGHTS_FILE), bytes).map_err(|e| Error::io(dir.join(WEIGHTS_FILE), e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Overwrites the values of `store` from a checkpoint. Names and shapes must
/// match exactly.
pub fn load_into<T: Scalar>(dir: &Path, store: &mut ParamStore<T>) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != "f32" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    if manifest.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for entry in &manifest.params {
        let id = store
            .lookup(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", entry.name)))?;
        let p = store.get_mut(id);
        if p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?}, checkpoint {:?}",
                entry.name,
                p.value.shape(),
                entry.shape
            )));
        }
        let n = p.value.len();
        let end = entry.offset + 4 * n;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("`{}` runs past end of weights", entry.name)));
        }
        let data = bytes[entry.offset..end]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        p.value = Tensor::from_vec(&entry.shape, data)?;
        p.grad = None;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f32_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.37 - 1.0), true).unwrap();
        s.add("a.running_var", Tensor::full(&[3], 0.5), false).unwrap();
        let m = save(dir.path(), &s, 1, 42, 7, serde_json::json!({"c": 4})).unwrap();
        assert_eq!(m.params[1].offset, 24);
        let mut t = s.clone();
        t.iter_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let m2 = load_into(dir.path(), &mut t).unwrap();
        assert_eq!(m, m2);
        for ((_, a), (_, b)) in s.iter().zip(t.iter()) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.trainable, b.trainable);
        }
        let bytes = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        assert_eq!(bytes.len(), 9 * 4);
        assert_eq!(&bytes[0..4], &(-1.0f32).to_le_bytes());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[2]), true).unwrap();
        save(dir.path(), &s, 1, 0, 0, serde_json::Value::Null).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("w", Tensor::zeros(&[3]), true).unwrap();
        assert!(load_into(dir.path(), &mut other).is_err());
    }
}
