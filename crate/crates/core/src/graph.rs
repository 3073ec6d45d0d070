//! Adaptive graph learning: a basic adjacency matrix derived from node
//! embeddings, refined into one row-softmaxed, top-τ sparsified matrix per
//! scale.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::GraphMode;
use crate::error::{Error, Result};
use crate::params::{normal, uniform_fan_in, ParamId, ParamKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the initial node embeddings.
pub const EMBEDDING_INIT_STD: f64 = 0.1;

/// Embedding stem producing the basic adjacency matrix.
#[derive(Debug, Clone)]
pub struct SharedLearner {
    /// `[N, d_e]` node embeddings.
    pub embeddings: ParamId,
    pub mlp_w: ParamId,
    pub mlp_b: ParamId,
    pub theta1: ParamId,
    pub theta2: ParamId,
    /// Entrywise output affine map (`[1, 1]` weight, `[1]` bias).
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Per-scale head: one affine map over adjacency rows.
#[derive(Debug, Clone)]
pub struct ScaleHead {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct GraphLearner {
    mode: GraphMode,
    n_vars: usize,
    embed_dim: usize,
    tau: usize,
    scales: usize,
    stems: Vec<SharedLearner>,
    heads: Vec<ScaleHead>,
}

/// Graphs for one forward pass.
#[derive(Debug, Clone)]
pub struct AdjacencySet {
    /// One basic matrix per stem.
    pub basic: Vec<Var>,
    /// Final `[N, N]` matrix per scale.
    pub scales: Vec<Var>,
}

impl SharedLearner {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, n: usize, de: usize) -> Self {
        let mut w = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), ParamKind::Weight, t);
        let embeddings = w("embeddings", normal(rng, &[n, de], EMBEDDING_INIT_STD));
        let mlp_w = w("mlp.w", uniform_fan_in(rng, &[de, de], de));
        let mlp_b = w("mlp.b", uniform_fan_in(rng, &[de], de));
        let theta1 = w("theta1", uniform_fan_in(rng, &[de, de], de));
        let theta2 = w("theta2", uniform_fan_in(rng, &[de, de], de));
        // identity start so the output ReLU does not begin dead
        let out_w = w("out.w", Tensor::new(vec![1, 1], vec![1.0]).expect("1x1"));
        let out_b = w("out.b", Tensor::zeros(&[1]));
        Self {
            embeddings,
            mlp_w,
            mlp_b,
            theta1,
            theta2,
            out_w,
            out_b,
        }
    }
}

impl ScaleHead {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, n: usize) -> Self {
        let w = store.add(format!("{prefix}.w"), ParamKind::Weight, uniform_fan_in(rng, &[n, n], n));
        let b = store.add(format!("{prefix}.b"), ParamKind::Weight, Tensor::zeros(&[n]));
        Self { w, b }
    }
}

/// `E' = tanh(E W + b)`, `M1 = tanh(E' Θ1)`, `M2 = tanh(E' Θ2)`,
/// `A_basic = ReLU(w * ReLU(M1 M2ᵀ - M2 M1ᵀ) + b)`.
pub fn shared_learn(tape: &mut Tape, store: &ParamStore, stem: &SharedLearner) -> Result<Var> {
    let e = tape.param(store, stem.embeddings);
    let (w, b) = (tape.param(store, stem.mlp_w), tape.param(store, stem.mlp_b));
    let lin = tape.linear(e, w, Some(b))?;
    let e2 = tape.tanh(lin);
    let t1 = tape.param(store, stem.theta1);
    let t2 = tape.param(store, stem.theta2);
    let p1 = tape.matmul(e2, t1)?;
    let m1 = tape.tanh(p1);
    let p2 = tape.matmul(e2, t2)?;
    let m2 = tape.tanh(p2);
    let m2t = tape.transpose(m2)?;
    let fwd = tape.matmul(m1, m2t)?;
    let bwd = tape.transpose(fwd)?;
    let diff = tape.sub(fwd, bwd)?;
    let r = tape.relu(diff);
    let n = tape.shape(r)[0];
    let col = tape.reshape(r, &[n, n, 1])?;
    let (ow, ob) = (tape.param(store, stem.out_w), tape.param(store, stem.out_b));
    let aff = tape.linear(col, ow, Some(ob))?;
    let flat = tape.reshape(aff, &[n, n])?;
    Ok(tape.relu(flat))
}

/// Keep-mask of the `tau` largest entries in each row of a row-major
/// `[rows, n]` matrix. Ties go to the lower column index.
pub fn topk_mask(values: &[f64], n: usize, tau: usize) -> Vec<f64> {
    let mut mask = vec![0.0; values.len()];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for (r, row) in values.chunks(n).enumerate() {
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in order.iter().take(tau) {
            mask[r * n + j] = 1.0;
        }
    }
    mask
}

/// Zeroes all but the top `tau` entries per row. The mask is treated as a
/// constant, so gradients reach the surviving entries only.
pub fn sparsify(tape: &mut Tape, x: Var, tau: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("sparsify", &shape, &[0, 0]));
    }
    let n = shape[1];
    if tau == 0 || tau > n {
        return Err(Error::config(format!("tau must lie in 1..={n}, got {tau}")));
    }
    let mask = topk_mask(tape.value(x), n, tau);
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

/// `A^k = Sparse(RowSoftmax(A_basic W^k + b^k))`.
pub fn scale_specific(tape: &mut Tape, store: &ParamStore, a_basic: Var, head: &ScaleHead, tau: usize) -> Result<Var> {
    let (w, b) = (tape.param(store, head.w), tape.param(store, head.b));
    let scaled = tape.linear(a_basic, w, Some(b))?;
    let soft = tape.softmax(scaled, 1)?;
    sparsify(tape, soft, tau)
}

impl GraphLearner {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        mode: GraphMode,
        scales: usize,
        n_vars: usize,
        embed_dim: usize,
        tau: usize,
    ) -> Result<Self> {
        if scales == 0 {
            return Err(Error::config("graph learner needs at least one scale"));
        }
        if tau == 0 {
            return Err(Error::config("tau must be positive"));
        }
        // keeping more neighbours than exist keeps them all
        let tau = tau.min(n_vars);
        let (n_stems, n_heads) = match mode {
            GraphMode::PerScaleHeads => (1, scales),
            GraphMode::Shared => (1, 1),
            GraphMode::NonShared => (scales, scales),
        };
        let stems = (0..n_stems)
            .map(|i| SharedLearner::init(store, rng, &format!("graph.stem{i}"), n_vars, embed_dim))
            .collect();
        let heads = (0..n_heads)
            .map(|i| ScaleHead::init(store, rng, &format!("graph.head{i}"), n_vars))
            .collect();
        Ok(Self {
            mode,
            n_vars,
            embed_dim,
            tau,
            scales,
            stems,
            heads,
        })
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn stems(&self) -> &[SharedLearner] {
        &self.stems
    }

    pub fn heads(&self) -> &[ScaleHead] {
        &self.heads
    }

    /// True when the embedding is not narrower than the node count.
    pub fn embedding_oversized(&self) -> bool {
        self.embed_dim >= self.n_vars
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore) -> Result<AdjacencySet> {
        let basic: Vec<Var> = self
            .stems
            .iter()
            .map(|s| shared_learn(tape, store, s))
            .collect::<Result<_>>()?;
        let scales = match self.mode {
            GraphMode::Shared => {
                let a = scale_specific(tape, store, basic[0], &self.heads[0], self.tau)?;
                vec![a; self.scales]
            }
            GraphMode::PerScaleHeads => self
                .heads
                .iter()
                .map(|h| scale_specific(tape, store, basic[0], h, self.tau))
                .collect::<Result<_>>()?,
            GraphMode::NonShared => self
                .heads
                .iter()
                .zip(&basic)
                .map(|(h, b)| scale_specific(tape, store, *b, h, self.tau))
                .collect::<Result<_>>()?,
        };
        Ok(AdjacencySet { basic, scales })
    }

    /// Evaluates the final per-scale matrices outside a training step.
    pub fn adjacency(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let set = self.forward(&mut tape, store)?;
        Ok(set.scales.iter().map(|v| tape.to_tensor(*v)).collect())
    }
}
