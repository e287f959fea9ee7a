//! Named parameter storage.
//!
//! Parameters live in a `BTreeMap` keyed by dot-separated path, so iteration
//! order is lexicographic and parameter counts reproduce across runs.
//! Checkpoints are a directory of one TSR file per parameter plus a JSON
//! manifest echoing paths, shapes, and the originating config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tsr;

#[derive(Clone, Default)]
pub struct ParameterRegistry {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        self.entries.insert(path.to_string(), value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::Config(format!("unknown parameter path {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| Error::Config(format!("unknown parameter path {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Result<Tensor> {
        self.entries
            .remove(path)
            .ok_or_else(|| Error::Config(format!("unknown parameter path {path}")))
    }

    /// Paths in lexicographic order.
    pub fn paths(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    /// Total element count over all parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (path, t) in &self.entries {
            t.check_finite(path)?;
        }
        Ok(())
    }

    // ── Checkpoint IO ────────────────────────────────────────────────

    pub fn save(&self, dir: &Path, config_echo: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir.join("params"))?;
        let mut manifest = CheckpointManifest {
            format: "seqvpr-checkpoint-v1".to_string(),
            total_elements: self.total_elements(),
            params: Vec::new(),
            config: config_echo.clone(),
        };
        for (path, t) in &self.entries {
            let file = format!("{path}.tsr");
            tsr::write_tensor(&dir.join("params").join(&file), t)?;
            manifest.params.push(ParamEntry {
                path: path.clone(),
                shape: t.shape().to_vec(),
                file,
            });
        }
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut reg = ParameterRegistry::new();
        for entry in &manifest.params {
            let t = tsr::read_tensor(&dir.join("params").join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Io(format!(
                    "checkpoint shape mismatch for {}: manifest {:?}, file {:?}",
                    entry.path,
                    entry.shape,
                    t.shape()
                )));
            }
            reg.insert(&entry.path, t)?;
        }
        Ok((reg, manifest.config))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    total_elements: usize,
    params: Vec<ParamEntry>,
    config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    path: String,
    shape: Vec<usize>,
    file: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_iterate_lexicographically() {
        let mut reg = ParameterRegistry::new();
        reg.insert("z.w", Tensor::zeros(&[2])).unwrap();
        reg.insert("a.b", Tensor::zeros(&[3])).unwrap();
        reg.insert("a.a", Tensor::zeros(&[1])).unwrap();
        assert_eq!(reg.paths(), vec!["a.a", "a.b", "z.w"]);
        assert_eq!(reg.total_elements(), 6);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut reg = ParameterRegistry::new();
        reg.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(reg.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = ParameterRegistry::new();
        reg.insert("layer.w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        reg.insert("layer.b", Tensor::new(vec![2], vec![-1.0, 0.5]).unwrap())
            .unwrap();
        let echo = serde_json::json!({"seed": 7});
        reg.save(dir.path(), &echo).unwrap();
        let (back, cfg) = ParameterRegistry::load(dir.path()).unwrap();
        assert_eq!(back.paths(), reg.paths());
        assert_eq!(back.get("layer.w").unwrap(), reg.get("layer.w").unwrap());
        assert_eq!(cfg["seed"], 7);
    }
}
