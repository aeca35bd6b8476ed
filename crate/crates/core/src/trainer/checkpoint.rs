use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "equimod-checkpoint-v1";

/// A single safetensors archive: named tensors plus string metadata.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: HashMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        let tmp = path.with_extension("safetensors.partial");
        let sorted: BTreeMap<&String, &Tensor> = self.tensors.iter().collect();
        safetensors::serialize_to_file(sorted, Some(meta), &tmp)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&data)
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
        let metadata: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
        if metadata.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint(format!("{} is not an {CHECKPOINT_FORMAT} archive", path.display())));
        }
        let tensors = candle_core::safetensors::load_buffer(&data, device)?;
        Ok(Self { tensors, metadata })
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("metadata {key} is not an integer")))
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }
}
