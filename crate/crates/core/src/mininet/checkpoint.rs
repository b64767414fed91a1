//! `.ftckpt` checkpoint files.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layout::{tensor_layout, TensorRole};
use super::net::Model;
use crate::container::{self, TensorEntry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FTCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint: the model config and every stored tensor, including
/// BN running statistics, in definition order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut tensors = IndexMap::new();
        for slot in tensor_layout(model.config()) {
            let t = match slot.role {
                TensorRole::Param(_) => model.params()[&slot.name].clone(),
                TensorRole::RunningMean => {
                    model.bn_stats()[slot.name.trim_end_matches(".running_mean")].running_mean.clone()
                }
                TensorRole::RunningVar => {
                    model.bn_stats()[slot.name.trim_end_matches(".running_var")].running_var.clone()
                }
            };
            tensors.insert(slot.name, t);
        }
        Self {
            config: model.config().clone(),
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut params = IndexMap::new();
        let mut bn = IndexMap::new();
        for slot in tensor_layout(&self.config) {
            let t = self.tensors[&slot.name].clone();
            match slot.role {
                TensorRole::Param(_) => {
                    params.insert(slot.name, t);
                }
                TensorRole::RunningMean => {
                    let layer = slot.name.trim_end_matches(".running_mean").to_string();
                    let mut stats = self.config.new_bn_stats(t.len());
                    stats.running_mean = t;
                    bn.insert(layer, stats);
                }
                TensorRole::RunningVar => {
                    let layer = slot.name.trim_end_matches(".running_var");
                    bn.get_mut(layer).expect("mean precedes var").running_var = t;
                }
            }
        }
        Model::from_parts(self.config.clone(), params, bn)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (tensors, blob) = container::layout_blob(self.tensors.iter().map(|(n, t)| (n.as_str(), t)));
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        container::frame(CHECKPOINT_MAGIC, &manifest, &blob)
    }

    /// Parses and fully validates a checkpoint. Never panics on malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let framed = container::unframe(CHECKPOINT_MAGIC, bytes)?;
        let manifest: Manifest = container::parse_manifest(&framed)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                12,
                format!("unsupported version {}, expected {CHECKPOINT_VERSION}", manifest.version),
            ));
        }
        manifest
            .config
            .validate()
            .map_err(|e| Error::format(12, format!("config: {e}")))?;
        let layout = tensor_layout(&manifest.config);
        if layout.len() != manifest.tensors.len() {
            return Err(Error::format(
                12,
                format!("manifest lists {} tensors, config implies {}", manifest.tensors.len(), layout.len()),
            ));
        }
        for (slot, entry) in layout.iter().zip(&manifest.tensors) {
            if slot.name != entry.name || slot.shape != entry.shape {
                return Err(Error::format(
                    framed.blob_start + entry.offset,
                    format!("expected `{}` {:?}, found `{}` {:?}", slot.name, slot.shape, entry.name, entry.shape),
                ));
            }
        }
        let decoded = container::read_tensors(&manifest.tensors, &framed)?;
        for (slot, (name, t)) in layout.iter().zip(&decoded) {
            if slot.role == TensorRole::RunningVar && t.data().iter().any(|&v| v < 0.0) {
                return Err(Error::format(framed.blob_start, format!("`{name}`: negative running variance")));
            }
        }
        Ok(Self {
            config: manifest.config,
            tensors: decoded.into_iter().collect(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes()?)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Checkpoint::read(path)?.to_model()
}
