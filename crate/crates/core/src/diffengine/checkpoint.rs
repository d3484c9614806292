//! Manifest + blob checkpoint format.
//!
//! `<stem>.json` lists every tensor as `{name, shape, offset}` (offset in
//! bytes) and carries free-form metadata; `<stem>.bin` is the concatenation of
//! the tensors as little-endian f32. Parameter sets store their Adam moments
//! as `<prefix>/<name>@m` and `@v` with the step counter in metadata, and RNG
//! positions are stored under `rng/<key>` in metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::params::{Param, ParamSet};
use super::rng::{RngState, SeededRng};
use super::tensor::Tensor;
use crate::{Error, Result};

pub const FORMAT: &str = "ogan-lab-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub entries: Vec<ManifestEntry>,
    pub meta: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor)>,
    meta: BTreeMap<String, Value>,
}

/// `<stem>.json` for a stem or manifest path.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name, tensor)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Serialize) -> Result<()> {
        self.meta.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&Value> {
        self.meta.get(key)
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no metadata {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn put_params(&mut self, prefix: &str, params: &ParamSet) -> Result<()> {
        let order: Vec<&str> = params.params().iter().map(|p| p.name.as_str()).collect();
        self.set_meta(format!("{prefix}@order"), &order)?;
        self.set_meta(format!("{prefix}@step"), params.step())?;
        for p in params.params() {
            self.insert(format!("{prefix}/{}", p.name), p.value.clone());
            self.insert(format!("{prefix}/{}@m", p.name), p.m.clone());
            self.insert(format!("{prefix}/{}@v", p.name), p.v.clone());
        }
        Ok(())
    }

    pub fn params(&self, prefix: &str) -> Result<ParamSet> {
        let order: Vec<String> = self.meta_as(&format!("{prefix}@order"))?;
        let step: u64 = self.meta_as(&format!("{prefix}@step"))?;
        let params = order
            .into_iter()
            .map(|name| {
                Ok(Param {
                    value: self.require(&format!("{prefix}/{name}"))?.clone(),
                    m: self.require(&format!("{prefix}/{name}@m"))?.clone(),
                    v: self.require(&format!("{prefix}/{name}@v"))?.clone(),
                    name,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ParamSet::restore(params, step)
    }

    pub fn put_rng(&mut self, key: &str, rng: &SeededRng) -> Result<()> {
        self.set_meta(format!("rng/{key}"), rng.state())
    }

    pub fn rng(&self, key: &str) -> Result<SeededRng> {
        let state: RngState = self.meta_as(&format!("rng/{key}"))?;
        SeededRng::from_state(&state)
    }

    fn blob_bytes(&self) -> (Vec<u8>, Vec<ManifestEntry>) {
        let total: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut bytes = Vec::with_capacity(total);
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: bytes.len() as u64,
            });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        (bytes, entries)
    }

    /// SHA-256 over tensor names, shapes and raw bits; independent of metadata.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (bytes, entries) = self.blob_bytes();
        let blob = blob_path(stem);
        let manifest = Manifest {
            format: FORMAT.to_string(),
            blob: blob
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            entries,
            meta: self.meta.clone(),
        };
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
        let mpath = manifest_path(stem);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }

    pub fn exists(stem: &Path) -> bool {
        manifest_path(stem).is_file() && blob_path(stem).is_file()
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let mpath = manifest_path(stem);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(Error::format(&mpath, format!("unknown format {:?}", manifest.format)));
        }
        let blob = mpath.with_file_name(&manifest.blob);
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * 4;
            if end > bytes.len() {
                return Err(Error::format(&blob, format!("tensor {} runs past end of blob", e.name)));
            }
            let data = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| Error::format(&mpath, err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Checkpoint {
            tensors,
            meta: manifest.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let mut rng = SeededRng::new(5);
        let mut params = ParamSet::new();
        params.add_uniform("conv.w", &[3, 3, 2, 4], 1.0, &mut rng).unwrap();
        params.add_zeros("conv.b", &[4]).unwrap();
        let grads = vec![Tensor::full(&[3, 3, 2, 4], 0.3), Tensor::full(&[4], -1e-7)];
        params
            .adam_step(&grads, &super::super::params::OptimConfig::new(1e-3, 0.5, 0.999))
            .unwrap();
        let mut ck = Checkpoint::new();
        ck.put_params("enc", &params).unwrap();
        ck.insert("odd", Tensor::new(vec![2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        ck.put_rng("train", &rng).unwrap();
        ck.set_meta("arch", "h128-mini").unwrap();
        ck.save(&stem).unwrap();

        let back = Checkpoint::load(&stem).unwrap();
        assert_eq!(back.params("enc").unwrap(), params);
        let odd = back.tensor("odd").unwrap();
        assert_eq!(odd.data()[0].to_bits(), f32::MIN_POSITIVE.to_bits());
        assert_eq!(odd.data()[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.rng("train").unwrap().next_u64(), rng.clone().next_u64());
        assert_eq!(back.digest(), ck.digest());
        assert_eq!(back.meta_as::<String>("arch").unwrap(), "h128-mini");
    }

    #[test]
    fn manifest_lists_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let mut ck = Checkpoint::new();
        ck.insert("a", Tensor::zeros(&[3]));
        ck.insert("b", Tensor::zeros(&[2, 2]));
        ck.save(&stem).unwrap();
        let m: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(&stem)).unwrap()).unwrap();
        assert_eq!(m.entries[0].offset, 0);
        assert_eq!(m.entries[1].offset, 12);
        assert_eq!(fs::metadata(blob_path(&stem)).unwrap().len(), 28);
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("t");
        let mut ck = Checkpoint::new();
        ck.insert("a", Tensor::zeros(&[8]));
        ck.save(&stem).unwrap();
        fs::write(blob_path(&stem), [0u8; 8]).unwrap();
        assert!(matches!(Checkpoint::load(&stem), Err(Error::Format { .. })));
    }
}
