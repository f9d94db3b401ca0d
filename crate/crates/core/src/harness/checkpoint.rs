//! JSON checkpoints.
//!
//! ```json
//! {
//!   "format": "gudn-checkpoint-v1",
//!   "model": { "encoder": {...}, "num_labels": 16, "d_feat": 32, ... },
//!   "tokens": ["alpha", "beta", ...],          // ids 3.. in order
//!   "clusters": null | {"C": 4, "assignments": [...]},
//!   "params": { "encoder.tok_emb": {"shape": [V, H], "data": [...]}, ... }
//! }
//! ```
//!
//! `data` is row-major. Floats are written in shortest round-trip form, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenVocabulary;
use crate::error::{data_err, Result};
use crate::model::{is_inference_param, GudnModel, ModelConfig};
use crate::params::{NamedArray, ParamStore};
use crate::sampling::ClusterIndex;

pub const CHECKPOINT_FORMAT: &str = "gudn-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub tokens: TokenVocabulary,
    pub clusters: Option<ClusterIndex>,
    pub params: BTreeMap<String, NamedArray>,
}

impl Checkpoint {
    pub fn from_model(model: &GudnModel, tokens: &TokenVocabulary) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            model: model.config().clone(),
            tokens: tokens.clone(),
            clusters: model.clusters().cloned(),
            params: model.params().to_named(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| data_err(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ckpt: Self = serde_json::from_slice(&bytes)
            .map_err(|e| data_err(format!("malformed checkpoint {}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(data_err(format!("unsupported checkpoint format {:?}", ckpt.format)));
        }
        Ok(ckpt)
    }

    /// Drops the label MLP and guide network, keeping only what inference reads.
    pub fn strip_training_params(&mut self) {
        self.params.retain(|name, _| is_inference_param(name));
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|name, _| !name.starts_with(prefix));
    }

    pub fn into_model(self) -> Result<GudnModel> {
        let store = ParamStore::from_named(&self.params)?;
        GudnModel::from_store(self.model, store, self.clusters)
    }
}
