//! Self-describing checkpoint container: a safetensors file whose header
//! metadata carries the kind, configuration, seed and step.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::Tensor;
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub const KIND_KEY: &str = "kind";
pub const CONFIG_KEY: &str = "config";
pub const SEED_KEY: &str = "seed";
pub const STEP_KEY: &str = "step";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(KIND_KEY.to_string(), kind.to_string());
        Self {
            tensors: BTreeMap::new(),
            metadata,
        }
    }

    pub fn with_config<C: Serialize>(mut self, config: &C) -> Result<Self> {
        self.metadata
            .insert(CONFIG_KEY.into(), serde_json::to_string(config)?);
        Ok(self)
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn extend(mut self, tensors: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        self.tensors.extend(tensors);
        self
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get(KIND_KEY).map(String::as_str)
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        let raw = self
            .metadata
            .get(CONFIG_KEY)
            .ok_or_else(|| Error::InvalidConfig("checkpoint has no config".into()))?;
        Ok(serde_json::from_str(raw)?)
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.metadata.get(key).and_then(|v| v.parse().ok())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        let contiguous: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
            .collect::<Result<_>>()?;
        safetensors::serialize_to_file(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(meta), path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        let tensors = candle_core::safetensors::load_buffer(&bytes, &crate::nn::device())?
            .into_iter()
            .collect();
        Ok(Self { tensors, metadata })
    }

    /// Loads and checks the `kind` tag.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind() != Some(kind) {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected a {kind} checkpoint, found {:?}", ck.kind()),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let t = Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &crate::nn::device()).unwrap();
        Checkpoint::new("unit")
            .with_config(&vec![1, 2, 3])
            .unwrap()
            .with_meta(SEED_KEY, 42)
            .extend([("w".to_string(), t.clone())])
            .save(&path)
            .unwrap();
        let ck = Checkpoint::load_kind(&path, "unit").unwrap();
        assert_eq!(ck.meta_u64(SEED_KEY), Some(42));
        assert_eq!(ck.config::<Vec<i32>>().unwrap(), vec![1, 2, 3]);
        assert_eq!(
            ck.tensors["w"].to_vec2::<f32>().unwrap(),
            t.to_vec2::<f32>().unwrap()
        );
        assert!(Checkpoint::load_kind(&path, "other").is_err());
    }
}
