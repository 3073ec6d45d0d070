//! Full forecaster: decomposition, graph learning, per-scale cell stacks and
//! the fusion head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::decomposition::{decompose, DecompositionParams, TIME_AXIS};
use crate::error::{Error, Result};
use crate::graph::GraphLearner;
use crate::params::{uniform_fan_in, ParamId, ParamKind, ParamStore};
use crate::search::{
    alpha_weights, cell_forward, connections, CellParams, DiscreteArchitecture, EdgeWeights, OpPools, OpShape,
};
use crate::tensor::{Tape, Tensor, Var};

/// Data-dependent sizes of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_vars: usize,
    pub in_channels: usize,
    pub input_len: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone)]
pub enum Architecture {
    /// Every connection mixes its whole pool; `alphas[k][e]` holds the logits
    /// of connection `e`, shared by all cells of scale `k`.
    Relaxed { pools: OpPools, alphas: Vec<Vec<ParamId>> },
    Fixed(DiscreteArchitecture),
}

#[derive(Debug, Clone)]
pub struct FusionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    dims: ModelDims,
    hidden: usize,
    nodes: usize,
    decomposition: DecompositionParams,
    graph: GraphLearner,
    cells: Vec<Vec<CellParams>>,
    arch: Architecture,
    head: FusionHead,
}

impl FusionHead {
    /// Concatenates per-scale `[B, N, F_k]` features on the last axis, then
    /// `linear -> ReLU -> linear`.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, per_scale: &[Var]) -> Result<Var> {
        let fused = tape.concat(per_scale, 2)?;
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        let h1 = tape.linear(fused, w1, Some(b1))?;
        let h1 = tape.relu(h1);
        tape.linear(h1, w2, Some(b2))
    }
}

/// Batch-averaged sum of squared errors.
pub fn l2_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let b = tape.shape(pred).first().copied().unwrap_or(1).max(1);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / b as f64))
}

impl Model {
    /// Search-stage model with relaxed cells and zero-initialised logits.
    pub fn relaxed<R: Rng + ?Sized>(cfg: &TrainConfig, dims: ModelDims, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let pools = OpPools::from_ablation(&cfg.ablation)?;
        let m = &cfg.model;
        Self::build(cfg, dims, store, rng, |store, rng, k, shape| {
            let alphas: Vec<ParamId> = connections(m.nodes_per_cell)
                .into_iter()
                .map(|(i, j)| {
                    let len = pools.pool(i, j).len();
                    store.add(format!("alpha.s{}.e{i}_{j}", k + 1), ParamKind::Arch, Tensor::zeros(&[len]))
                })
                .collect();
            let cells = (0..m.cells_per_scale[k])
                .map(|c| {
                    let prefix = format!("cell.s{}.c{c}", k + 1);
                    CellParams::init_mixed(store, rng, &prefix, &pools, m.nodes_per_cell, shape)
                })
                .collect();
            (alphas, cells)
        })
        .map(|(mut model, alphas)| {
            model.arch = Architecture::Relaxed { pools, alphas };
            model
        })
    }

    /// Train-stage model with one operation per connection. The cell counts
    /// come from `arch`.
    pub fn fixed<R: Rng + ?Sized>(
        cfg: &TrainConfig,
        dims: ModelDims,
        arch: &DiscreteArchitecture,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        if arch.scales.len() != cfg.model.scales || arch.nodes_per_cell != cfg.model.nodes_per_cell {
            return Err(Error::config(format!(
                "architecture has {} scales of {}-node cells, config expects {} scales of {}-node cells",
                arch.scales.len(),
                arch.nodes_per_cell,
                cfg.model.scales,
                cfg.model.nodes_per_cell
            )));
        }
        let mut cfg = cfg.clone();
        cfg.model.cells_per_scale = arch.cells_per_scale();
        let nodes = arch.nodes_per_cell;
        Self::build(&cfg, dims, store, rng, |store, rng, k, shape| {
            let cells = arch.scales[k]
                .cells
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    let prefix = format!("cell.s{}.c{c}", k + 1);
                    CellParams::init_fixed(store, rng, &prefix, cell, nodes, shape)
                })
                .collect();
            (Vec::new(), cells)
        })
        .map(|(mut model, _)| {
            model.arch = Architecture::Fixed(arch.clone());
            model
        })
    }

    fn build<R: Rng + ?Sized>(
        cfg: &TrainConfig,
        dims: ModelDims,
        store: &mut ParamStore,
        rng: &mut R,
        mut scale_cells: impl FnMut(&mut ParamStore, &mut R, usize, OpShape) -> (Vec<ParamId>, Vec<CellParams>),
    ) -> Result<(Self, Vec<Vec<ParamId>>)> {
        cfg.validate()?;
        let m = &cfg.model;
        if dims.n_vars == 0 || dims.in_channels == 0 || dims.horizon == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if dims.input_len != cfg.data.input_len || dims.horizon != cfg.data.horizon {
            return Err(Error::config(format!(
                "dataset windows are {}→{} but the config expects {}→{}",
                dims.input_len, dims.horizon, cfg.data.input_len, cfg.data.horizon
            )));
        }
        let decomposition = DecompositionParams::init(store, rng, m.scales, dims.in_channels, m.hidden_dim)?;
        let graph = GraphLearner::new(
            store,
            rng,
            cfg.ablation.graph,
            m.scales,
            dims.n_vars,
            m.embed_dim,
            m.tau,
        )?;
        let mut alphas = Vec::with_capacity(m.scales);
        let mut cells = Vec::with_capacity(m.scales);
        for k in 0..m.scales {
            let shape = OpShape {
                n: dims.n_vars,
                t: dims.input_len >> k,
                c: m.hidden_dim,
            };
            let (a, c) = scale_cells(store, rng, k, shape);
            alphas.push(a);
            cells.push(c);
        }
        let fused: usize = (0..m.scales).map(|k| (dims.input_len >> k) * m.hidden_dim).sum();
        let head = FusionHead {
            w1: store.add("head.w1", ParamKind::Weight, uniform_fan_in(rng, &[fused, m.hidden_dim], fused)),
            b1: store.add("head.b1", ParamKind::Weight, uniform_fan_in(rng, &[m.hidden_dim], fused)),
            w2: store.add(
                "head.w2",
                ParamKind::Weight,
                uniform_fan_in(rng, &[m.hidden_dim, dims.horizon], m.hidden_dim),
            ),
            b2: store.add("head.b2", ParamKind::Weight, uniform_fan_in(rng, &[dims.horizon], m.hidden_dim)),
        };
        let model = Self {
            dims,
            hidden: m.hidden_dim,
            nodes: m.nodes_per_cell,
            decomposition,
            graph,
            cells,
            arch: Architecture::Fixed(DiscreteArchitecture {
                nodes_per_cell: m.nodes_per_cell,
                scales: Vec::new(),
            }),
            head,
        };
        Ok((model, alphas))
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn scales(&self) -> usize {
        self.cells.len()
    }

    pub fn nodes_per_cell(&self) -> usize {
        self.nodes
    }

    pub fn graph(&self) -> &GraphLearner {
        &self.graph
    }

    pub fn decomposition(&self) -> &DecompositionParams {
        &self.decomposition
    }

    pub fn cells(&self) -> &[Vec<CellParams>] {
        &self.cells
    }

    pub fn head(&self) -> &FusionHead {
        &self.head
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Forecasts `[B, N, horizon]` from inputs `[B, N, input_len, C]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        let expect = [self.dims.n_vars, self.dims.input_len, self.dims.in_channels];
        if xs.len() != 4 || xs[1..] != expect {
            return Err(Error::shape("forward", &xs, &expect).in_stage("input"));
        }
        let b = xs[0];
        let scales = decompose(tape, store, &self.decomposition, x).map_err(|e| e.in_stage("decomposition"))?;
        let adj = self
            .graph
            .forward(tape, store)
            .map_err(|e| e.in_stage("graph learning"))?;
        let mut flat = Vec::with_capacity(scales.len());
        for (k, s) in scales.iter().enumerate() {
            let weights = match &self.arch {
                Architecture::Relaxed { alphas, .. } => Some(alpha_weights(tape, store, &alphas[k])?),
                Architecture::Fixed(_) => None,
            };
            let mut h = s.tensor;
            for cell in &self.cells[k] {
                let mode = match &weights {
                    Some(w) => EdgeWeights::Mixed(w),
                    None => EdgeWeights::Fixed,
                };
                h = cell_forward(tape, store, cell, mode, h, adj.scales[k]).map_err(|e| e.in_stage("cell"))?;
            }
            let t = tape.shape(h)[TIME_AXIS];
            flat.push(tape.reshape(h, &[b, self.dims.n_vars, t * self.hidden])?);
        }
        self.head.apply(tape, store, &flat).map_err(|e| e.in_stage("fusion"))
    }

    /// Normalised forecasts for a batch of inputs.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, store, xv)?;
        Ok(tape.to_tensor(y))
    }

    /// Current logits per scale and connection (empty for fixed models).
    pub fn alphas(&self, store: &ParamStore) -> Vec<Vec<Vec<f64>>> {
        match &self.arch {
            Architecture::Relaxed { alphas, .. } => alphas
                .iter()
                .map(|scale| scale.iter().map(|id| store.get(*id).data().to_vec()).collect())
                .collect(),
            Architecture::Fixed(_) => Vec::new(),
        }
    }

    /// Fixes every connection to its highest-weighted operation.
    pub fn discretize(&self, store: &ParamStore) -> Result<DiscreteArchitecture> {
        match &self.arch {
            Architecture::Relaxed { pools, .. } => {
                let cells: Vec<usize> = self.cells.iter().map(Vec::len).collect();
                DiscreteArchitecture::from_alphas(pools, self.nodes, &cells, &self.alphas(store))
            }
            Architecture::Fixed(a) => Ok(a.clone()),
        }
    }

    /// Final per-scale adjacency matrices.
    pub fn adjacency(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        self.graph.adjacency(store)
    }
}
