//! Versioned JSON checkpoints holding everything needed to rebuild a model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use scalenas_core::data::NormStats;
use scalenas_core::train::{stream_rng, streams};
use scalenas_core::{DiscreteArchitecture, Model, ModelDims, ParamKind, ParamStore, Tensor, TrainConfig};

use crate::error::{CliError, Result};
use crate::files::{read_text, write_json_checked};

pub const FORMAT: &str = "scalenas-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Relaxed model; parameters include the architecture logits.
    Search,
    /// Fixed architecture retrained from scratch.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub config: TrainConfig,
    pub dims: ModelDims,
    /// The discretised architecture; for a search checkpoint this is the
    /// argmax of the stored logits.
    pub arch: DiscreteArchitecture,
    pub stats: NormStats,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        config: &TrainConfig,
        model: &Model,
        store: &ParamStore,
        arch: &DiscreteArchitecture,
        stats: &NormStats,
    ) -> Self {
        let params = store
            .entries()
            .iter()
            .map(|e| SavedParam {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.tensor.shape().to_vec(),
                data: e.tensor.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            stage,
            seed: config.seed,
            config: config.clone(),
            dims: model.dims(),
            arch: arch.clone(),
            stats: stats.clone(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_checked(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let bad = |message: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        // check the header before the full schema so old files get a clear message
        let head: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if head.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
            return Err(bad(format!("not a {FORMAT} file")));
        }
        match head.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(VERSION) => {}
            other => return Err(bad(format!("unsupported version {other:?}, expected {VERSION}"))),
        }
        serde_json::from_value(head).map_err(|e| bad(e.to_string()))
    }

    /// Rebuilds the model and copies the stored values into it. Names,
    /// kinds and shapes must match exactly.
    pub fn rebuild(&self, path: &Path) -> Result<(Model, ParamStore)> {
        let bad = |message: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let mut store = ParamStore::new();
        let model = match self.stage {
            Stage::Search => {
                let mut rng = stream_rng(self.seed, streams::SEARCH_INIT);
                Model::relaxed(&self.config, self.dims, &mut store, &mut rng)?
            }
            Stage::Train => {
                let mut rng = stream_rng(self.seed, streams::TRAIN_INIT);
                Model::fixed(&self.config, self.dims, &self.arch, &mut store, &mut rng)?
            }
        };
        if store.len() != self.params.len() {
            return Err(bad(format!(
                "model has {} parameter tensors, file has {}",
                store.len(),
                self.params.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, saved) in ids.into_iter().zip(&self.params) {
            let e = store.entry(id);
            if e.name != saved.name || e.kind != saved.kind || e.tensor.shape() != &saved.shape[..] {
                return Err(bad(format!(
                    "parameter `{}` {:?} {:?} does not match model parameter `{}` {:?} {:?}",
                    saved.name,
                    saved.kind,
                    saved.shape,
                    e.name,
                    e.kind,
                    e.tensor.shape()
                )));
            }
            let t = Tensor::new(saved.shape.clone(), saved.data.clone())
                .map_err(|err| bad(format!("parameter `{}`: {err}", saved.name)))?;
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok((model, store))
    }
}
