//! Cells: DAGs whose connections carry relaxed or fixed operations.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{apply_op, DiscreteCell, OpKind, OpParams, OpPools, OpShape};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Var};

/// All connections `(i, j)`, `i < j < nodes`, ordered by target then source.
pub fn connections(nodes: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(nodes * nodes.saturating_sub(1) / 2);
    for j in 1..nodes {
        for i in 0..j {
            out.push((i, j));
        }
    }
    out
}

/// Operations, with their weights, carried by one connection.
#[derive(Debug, Clone)]
pub struct EdgeParams {
    pub from: usize,
    pub to: usize,
    pub ops: Vec<(OpKind, OpParams)>,
}

#[derive(Debug, Clone)]
pub struct CellParams {
    pub nodes: usize,
    pub edges: Vec<EdgeParams>,
}

/// How connection outputs are combined.
#[derive(Debug, Clone, Copy)]
pub enum EdgeWeights<'a> {
    /// One softmaxed weight vector per connection, in connection order.
    Mixed(&'a [Var]),
    /// Every connection holds exactly one operation.
    Fixed,
}

impl CellParams {
    /// A relaxed cell holding every pool operation on every connection.
    pub fn init_mixed<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        pools: &OpPools,
        nodes: usize,
        shape: OpShape,
    ) -> Self {
        let edges = connections(nodes)
            .into_iter()
            .map(|(from, to)| {
                let ops = pools
                    .pool(from, to)
                    .iter()
                    .map(|&k| {
                        let p = OpParams::init(k, store, rng, &format!("{prefix}.e{from}_{to}.{k}"), shape);
                        (k, p)
                    })
                    .collect();
                EdgeParams { from, to, ops }
            })
            .collect();
        Self { nodes, edges }
    }

    /// A fixed cell with one operation per connection.
    pub fn init_fixed<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cell: &DiscreteCell,
        nodes: usize,
        shape: OpShape,
    ) -> Self {
        let edges = cell
            .edges
            .iter()
            .map(|e| {
                let p = OpParams::init(e.op, store, rng, &format!("{prefix}.e{}_{}.{}", e.from, e.to, e.op), shape);
                EdgeParams {
                    from: e.from,
                    to: e.to,
                    ops: alloc::vec![(e.op, p)],
                }
            })
            .collect();
        Self { nodes, edges }
    }
}

/// Softmax of each connection's logits.
pub fn alpha_weights(tape: &mut Tape, store: &ParamStore, alphas: &[ParamId]) -> Result<Vec<Var>> {
    alphas
        .iter()
        .map(|&id| {
            let a = tape.param(store, id);
            tape.softmax(a, 0)
        })
        .collect()
}

/// `sum_k w_k * op_k(x)`. Zero operations contribute nothing and are
/// skipped.
pub fn mixed_connection(
    tape: &mut Tape,
    store: &ParamStore,
    edge: &EdgeParams,
    weights: Var,
    x: Var,
    adj: Var,
) -> Result<Var> {
    let wlen = tape.shape(weights).to_vec();
    if wlen[..] != [edge.ops.len()] {
        return Err(Error::shape("mixed_connection", &wlen, &[edge.ops.len()]));
    }
    let mut terms = Vec::with_capacity(edge.ops.len());
    for (idx, (kind, params)) in edge.ops.iter().enumerate() {
        if *kind == OpKind::Zero {
            continue;
        }
        terms.push((idx, apply_op(tape, store, *kind, params, x, adj)?));
    }
    if terms.is_empty() {
        let shape = tape.shape(x).to_vec();
        return Ok(tape.zeros(&shape));
    }
    tape.weighted_sum(&terms, weights)
}

/// Evaluates a cell whose node 0 holds `x`; returns the sum of nodes
/// `1..M-1`. Node sums run in ascending source order.
pub fn cell_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cell: &CellParams,
    weights: EdgeWeights<'_>,
    x: Var,
    adj: Var,
) -> Result<Var> {
    if let EdgeWeights::Mixed(w) = weights {
        if w.len() != cell.edges.len() {
            return Err(Error::shape("cell_forward", &[w.len()], &[cell.edges.len()]));
        }
    }
    let shape = tape.shape(x).to_vec();
    let mut nodes: Vec<Var> = Vec::with_capacity(cell.nodes);
    nodes.push(x);
    let mut edge_idx = 0;
    for j in 1..cell.nodes {
        let mut acc: Option<Var> = None;
        for i in 0..j {
            let edge = cell
                .edges
                .get(edge_idx)
                .filter(|e| (e.from, e.to) == (i, j))
                .ok_or_else(|| Error::config(format!("cell is missing connection ({i}, {j})")))?;
            let input = nodes[i];
            let out = match weights {
                EdgeWeights::Mixed(w) => Some(mixed_connection(tape, store, edge, w[edge_idx], input, adj)?),
                EdgeWeights::Fixed => {
                    let [(kind, params)] = &edge.ops[..] else {
                        return Err(Error::config(format!(
                            "fixed connection ({i}, {j}) holds {} operations",
                            edge.ops.len()
                        )));
                    };
                    match kind {
                        OpKind::Zero => None,
                        _ => Some(apply_op(tape, store, *kind, params, input, adj)?),
                    }
                }
            };
            edge_idx += 1;
            acc = match (acc, out) {
                (Some(a), Some(o)) => Some(tape.add(a, o)?),
                (a, o) => a.or(o),
            };
        }
        let node = match acc {
            Some(v) => v,
            None => tape.zeros(&shape),
        };
        nodes.push(node);
    }
    let mut out = nodes[1];
    for &n in &nodes[2..] {
        out = tape.add(out, n)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::ChosenEdge;
    use crate::tensor::Tensor;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn connection_order() {
        assert_eq!(connections(2), vec![(0, 1)]);
        assert_eq!(connections(4), vec![(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]);
    }

    fn fixed(ops: &[OpKind], nodes: usize) -> (ParamStore, CellParams) {
        let edges = connections(nodes)
            .into_iter()
            .zip(ops)
            .map(|((from, to), &op)| ChosenEdge { from, to, op })
            .collect();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = OpShape { n: 2, t: 4, c: 3 };
        let cell = CellParams::init_fixed(&mut store, &mut rng, "c", &DiscreteCell { edges }, nodes, shape);
        (store, cell)
    }

    #[test]
    fn single_identity_passes_through() {
        let (store, cell) = fixed(&[OpKind::Identity], 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4, 3], |i| i as f64));
        let adj = tape.zeros(&[2, 2]);
        let y = cell_forward(&mut tape, &store, &cell, EdgeWeights::Fixed, x, adj).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn identity_chain_counts_paths() {
        // node1 = x, node2 = x + node1 = 2x, output = 3x
        let (store, cell) = fixed(&[OpKind::Identity; 3], 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4, 3], |i| i as f64));
        let adj = tape.zeros(&[2, 2]);
        let y = cell_forward(&mut tape, &store, &cell, EdgeWeights::Fixed, x, adj).unwrap();
        for (a, b) in tape.value(y).iter().zip(tape.value(x)) {
            assert_eq!(*a, 3.0 * b);
        }
    }

    #[test]
    fn all_zero_cell_outputs_zero() {
        let (store, cell) = fixed(&[OpKind::Zero; 6], 4);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4, 3], |i| i as f64 + 1.0));
        let adj = tape.zeros(&[2, 2]);
        let y = cell_forward(&mut tape, &store, &cell, EdgeWeights::Fixed, x, adj).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_identity_average_halves() {
        let pools = OpPools {
            adjacent: vec![OpKind::Zero, OpKind::Identity],
            skip: vec![OpKind::Zero],
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = CellParams::init_mixed(&mut store, &mut rng, "c", &pools, 2, OpShape { n: 2, t: 4, c: 3 });
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4, 3], |i| i as f64));
        let adj = tape.zeros(&[2, 2]);
        let w = tape.constant(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let y = mixed_connection(&mut tape, &store, &cell.edges[0], w, x, adj).unwrap();
        for (a, b) in tape.value(y).iter().zip(tape.value(x)) {
            assert_eq!(*a, b / 2.0);
        }
        let bad = tape.constant(Tensor::new(vec![3], vec![0.2; 3]).unwrap());
        assert!(mixed_connection(&mut tape, &store, &cell.edges[0], bad, x, adj).is_err());
    }
}
