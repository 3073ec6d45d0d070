//! Run configuration and its defaults.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::OptimizerKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Input window length.
    pub input_len: usize,
    /// Forecast horizon.
    pub horizon: usize,
    /// Chronological train / valid / test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input_len: 12,
            horizon: 12,
            split: [0.7, 0.2, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of temporal scales K.
    pub scales: usize,
    /// Neighbours kept per adjacency row.
    pub tau: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub cells_per_scale: Vec<usize>,
    pub nodes_per_cell: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            tau: 20,
            embed_dim: 20,
            hidden_dim: 32,
            cells_per_scale: vec![1, 2, 2],
            nodes_per_cell: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub search_epochs: usize,
    pub train_epochs: usize,
    pub lr_weights: f64,
    pub lr_arch: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            search_epochs: 60,
            train_epochs: 100,
            lr_weights: 0.01,
            lr_arch: 0.001,
            batch_size: 16,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

/// How adjacency matrices are shared across scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    /// One shared learner plus one head per scale.
    #[default]
    PerScaleHeads,
    /// One learner and one head reused at every scale.
    Shared,
    /// A complete independent learner per scale.
    NonShared,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub graph: GraphMode,
    pub no_att: bool,
    pub no_conv: bool,
    pub no_basic: bool,
    pub no_grouping: bool,
}

/// A single ablation switch as named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Shared,
    NonShared,
    NoAtt,
    NoConv,
    NoBasic,
    NoGrouping,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "shared" => Ablation::Shared,
            "non-shared" => Ablation::NonShared,
            "no-att" => Ablation::NoAtt,
            "no-conv" => Ablation::NoConv,
            "no-basic" => Ablation::NoBasic,
            "no-grouping" => Ablation::NoGrouping,
            other => return Err(Error::config(format!("unknown ablation `{other}`"))),
        })
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Shared => "shared",
            Ablation::NonShared => "non-shared",
            Ablation::NoAtt => "no-att",
            Ablation::NoConv => "no-conv",
            Ablation::NoBasic => "no-basic",
            Ablation::NoGrouping => "no-grouping",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub ablation: AblationConfig,
}

impl TrainConfig {
    /// Overrides K. The per-scale cell counts are truncated, or extended by
    /// repeating the last count.
    pub fn set_scales(&mut self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::config("scales must be at least 1"));
        }
        let cells = &mut self.model.cells_per_scale;
        let last = cells.last().copied().unwrap_or(1);
        cells.resize(k, last);
        self.model.scales = k;
        Ok(())
    }

    pub fn apply_ablation(&mut self, ab: Ablation) -> Result<()> {
        let a = &mut self.ablation;
        match ab {
            Ablation::Shared | Ablation::NonShared => {
                let mode = if ab == Ablation::Shared {
                    GraphMode::Shared
                } else {
                    GraphMode::NonShared
                };
                if a.graph != GraphMode::PerScaleHeads && a.graph != mode {
                    return Err(Error::config(
                        "ablations `shared` and `non-shared` are mutually exclusive",
                    ));
                }
                a.graph = mode;
            }
            Ablation::NoAtt => a.no_att = true,
            Ablation::NoConv => a.no_conv = true,
            Ablation::NoBasic => a.no_basic = true,
            Ablation::NoGrouping => a.no_grouping = true,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.input_len", self.data.input_len),
            ("data.horizon", self.data.horizon),
            ("model.scales", self.model.scales),
            ("model.tau", self.model.tau),
            ("model.embed_dim", self.model.embed_dim),
            ("model.hidden_dim", self.model.hidden_dim),
            ("optim.batch_size", self.optim.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.model.nodes_per_cell < 2 {
            return Err(Error::config("model.nodes_per_cell must be at least 2"));
        }
        if self.model.cells_per_scale.len() != self.model.scales {
            return Err(Error::config(format!(
                "model.cells_per_scale has {} entries for {} scales",
                self.model.cells_per_scale.len(),
                self.model.scales
            )));
        }
        if self.model.cells_per_scale.contains(&0) {
            return Err(Error::config("model.cells_per_scale entries must be positive"));
        }
        let period = 1usize << (self.model.scales - 1).min(63);
        if !self.data.input_len.is_multiple_of(period) {
            return Err(Error::config(format!(
                "data.input_len {} is not divisible by 2^(scales-1) = {period}",
                self.data.input_len
            )));
        }
        let [tr, va, te] = self.data.split;
        if !(tr > 0.0 && va > 0.0 && te >= 0.0) || libm::fabs(tr + va + te - 1.0) > 1e-9 {
            return Err(Error::config("data.split must be positive fractions summing to 1"));
        }
        for (name, lr) in [("optim.lr_weights", self.optim.lr_weights), ("optim.lr_arch", self.optim.lr_arch)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        crate::search::OpPools::from_ablation(&self.ablation)?;
        Ok(())
    }
}
