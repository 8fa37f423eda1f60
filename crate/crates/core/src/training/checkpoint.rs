//! Versioned safetensors checkpoints with an embedded JSON config snapshot.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Parsing,
    Generator,
}

/// Mean of each logged quantity over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub config: TrainConfig,
    /// Weights, buffers and optimizer moments, keyed `<section>/<name>`.
    pub tensors: BTreeMap<String, Tensor>,
    pub optimizer_steps: BTreeMap<String, u64>,
    pub history: Vec<EpochMetrics>,
}

fn meta_err(what: &str) -> Error {
    Error::Checkpoint(format!("metadata field `{what}` is missing or malformed"))
}

impl Checkpoint {
    /// Entries of one section with the `<section>/` prefix stripped.
    pub fn section(&self, section: &str) -> HashMap<String, Tensor> {
        let prefix = format!("{section}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    pub fn insert_section(&mut self, section: &str, tensors: impl IntoIterator<Item = (String, Tensor)>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{section}/{k}"), v);
        }
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::config(format!(
                "expected a {stage:?} checkpoint, found {:?}",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        meta.insert("stage".to_string(), serde_json::to_string(&self.stage)?);
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("optimizer_steps".to_string(), serde_json::to_string(&self.optimizer_steps)?);
        meta.insert("history".to_string(), serde_json::to_string(&self.history)?);
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.contiguous()?)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        safetensors::serialize_to_file(tensors, Some(meta), &tmp)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{} is not a checkpoint: {e}", path.display())))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let get = |k: &str| meta.get(k).ok_or_else(|| meta_err(k));
        let version: u32 = get("format_version")?.parse().map_err(|_| meta_err("format_version"))?;
        if version > FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format {version} is newer than supported format {FORMAT_VERSION}"
            )));
        }
        let stage = serde_json::from_str(get("stage")?).map_err(|_| meta_err("stage"))?;
        let epoch = get("epoch")?.parse().map_err(|_| meta_err("epoch"))?;
        let step = get("step")?.parse().map_err(|_| meta_err("step"))?;
        let config: TrainConfig =
            serde_json::from_str(get("config")?).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let optimizer_steps = serde_json::from_str(get("optimizer_steps")?).map_err(|_| meta_err("optimizer_steps"))?;
        let history = serde_json::from_str(get("history")?).map_err(|_| meta_err("history"))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self {
            stage,
            epoch,
            step,
            config,
            tensors,
            optimizer_steps,
            history,
        })
    }
}
