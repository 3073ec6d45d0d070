//! Candidate operations on `[B, N, T, c]` activations.

use alloc::format;

use rand::Rng;

use super::OpKind;
use crate::decomposition::{KERNEL, TIME_AXIS};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, ParamId, ParamKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

const VAR_AXIS: usize = 1;

/// Per-sample activation shape seen by an operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpShape {
    pub n: usize,
    pub t: usize,
    pub c: usize,
}

#[derive(Debug, Clone)]
pub enum OpParams {
    None,
    Conv1 {
        w: ParamId,
        b: ParamId,
    },
    TConv {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    /// `u1: [N]`, `u2: [c, N]`, `u3: [c]`, `v` and `b`: `[T, T]`.
    TAtt {
        u1: ParamId,
        u2: ParamId,
        u3: ParamId,
        v: ParamId,
        b: ParamId,
    },
    Gcn {
        w: ParamId,
    },
    /// `u4: [T]`, `u5: [c, T]`, `u6: [c]`, `v` and `b`: `[N, N]`.
    SAtt {
        u4: ParamId,
        u5: ParamId,
        u6: ParamId,
        v: ParamId,
        b: ParamId,
    },
}

impl OpParams {
    pub fn init<R: Rng + ?Sized>(kind: OpKind, store: &mut ParamStore, rng: &mut R, prefix: &str, s: OpShape) -> Self {
        let OpShape { n, t, c } = s;
        let mut add = |name: &str, tensor: Tensor| store.add(format!("{prefix}.{name}"), ParamKind::Weight, tensor);
        match kind {
            OpKind::Zero | OpKind::Identity => OpParams::None,
            OpKind::Conv1 => OpParams::Conv1 {
                w: add("w", uniform_fan_in(rng, &[c, c], c)),
                b: add("b", uniform_fan_in(rng, &[c], c)),
            },
            OpKind::TConv => {
                let fan = KERNEL * c;
                OpParams::TConv {
                    w1: add("w1", uniform_fan_in(rng, &[KERNEL, c, c], fan)),
                    b1: add("b1", uniform_fan_in(rng, &[c], fan)),
                    w2: add("w2", uniform_fan_in(rng, &[KERNEL, c, c], fan)),
                    b2: add("b2", uniform_fan_in(rng, &[c], fan)),
                }
            }
            OpKind::TAtt => OpParams::TAtt {
                u1: add("u1", uniform_fan_in(rng, &[n], n)),
                u2: add("u2", uniform_fan_in(rng, &[c, n], c)),
                u3: add("u3", uniform_fan_in(rng, &[c], c)),
                v: add("v", uniform_fan_in(rng, &[t, t], t)),
                b: add("b", Tensor::zeros(&[t, t])),
            },
            OpKind::Gcn => OpParams::Gcn {
                w: add("w", uniform_fan_in(rng, &[c, c], c)),
            },
            OpKind::SAtt => OpParams::SAtt {
                u4: add("u4", uniform_fan_in(rng, &[t], t)),
                u5: add("u5", uniform_fan_in(rng, &[c, t], c)),
                u6: add("u6", uniform_fan_in(rng, &[c], c)),
                v: add("v", uniform_fan_in(rng, &[n, n], n)),
                b: add("b", Tensor::zeros(&[n, n])),
            },
        }
    }

    fn kind_matches(&self, kind: OpKind) -> bool {
        matches!(
            (self, kind),
            (OpParams::None, OpKind::Zero | OpKind::Identity)
                | (OpParams::Conv1 { .. }, OpKind::Conv1)
                | (OpParams::TConv { .. }, OpKind::TConv)
                | (OpParams::TAtt { .. }, OpKind::TAtt)
                | (OpParams::Gcn { .. }, OpKind::Gcn)
                | (OpParams::SAtt { .. }, OpKind::SAtt)
        )
    }
}

/// Applies one candidate operation to `x: [B, N, T, c]`. `adj` is the
/// scale's `[N, N]` adjacency, read only by GCN.
pub fn apply_op(
    tape: &mut Tape,
    store: &ParamStore,
    kind: OpKind,
    params: &OpParams,
    x: Var,
    adj: Var,
) -> Result<Var> {
    if !params.kind_matches(kind) {
        return Err(Error::config(format!("parameters do not belong to operation {kind}")));
    }
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(kind.name(), &shape, &[0, 0, 0, 0]));
    }
    let n = shape[1];
    match *params {
        OpParams::None => Ok(if kind == OpKind::Zero { tape.zeros(&shape) } else { x }),
        OpParams::Conv1 { w, b } => {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            tape.linear(x, w, Some(b))
        }
        OpParams::TConv { w1, b1, w2, b2 } => {
            let (w1, b1) = (tape.param(store, w1), tape.param(store, b1));
            let (w2, b2) = (tape.param(store, w2), tape.param(store, b2));
            let f = tape.conv1d(x, w1, b1, TIME_AXIS)?;
            let filter = tape.tanh(f);
            let g = tape.conv1d(x, w2, b2, TIME_AXIS)?;
            let gate = tape.sigmoid(g);
            tape.mul(filter, gate)
        }
        OpParams::TAtt { .. } => {
            let att = attention_matrix(tape, store, params, x)?;
            tape.contract(att, x, TIME_AXIS)
        }
        OpParams::Gcn { w } => {
            let an = tape.shape(adj).to_vec();
            if an[..] != [n, n] {
                return Err(Error::shape("gcn", &an, &[n, n]));
            }
            let eye = tape.constant(Tensor::eye(n));
            let looped = tape.add(adj, eye)?;
            let prop = tape.normalize_axis(looped, 1)?;
            let mixed = tape.contract(prop, x, VAR_AXIS)?;
            let w = tape.param(store, w);
            let out = tape.linear(mixed, w, None)?;
            Ok(tape.relu(out))
        }
        OpParams::SAtt { .. } => {
            let att = attention_matrix(tape, store, params, x)?;
            tape.contract(att, x, VAR_AXIS)
        }
    }
}

/// Row-normalised attention of T-Att (`[B, T, T]`) or S-Att (`[B, N, N]`).
pub fn attention_matrix(tape: &mut Tape, store: &ParamStore, params: &OpParams, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("attention", &shape, &[0, 0, 0, 0]));
    }
    let (bs, n, t, c) = (shape[0], shape[1], shape[2], shape[3]);
    match *params {
        OpParams::TAtt { u1, u2, u3, v, b } => {
            // (x U1) U2: reduce the variable axis, then map channels to N -> [B, T, N]
            let u1 = tape.param(store, u1);
            let u1 = tape.reshape(u1, &[1, n])?;
            let red = tape.contract(u1, x, VAR_AXIS)?;
            let red = tape.reshape(red, &[bs, t, c])?;
            let u2 = tape.param(store, u2);
            let lhs = tape.linear(red, u2, None)?;
            // U3 xᵀ: reduce channels -> [B, N, T]
            let u3 = tape.param(store, u3);
            let u3 = tape.reshape(u3, &[c, 1])?;
            let rhs = tape.linear(x, u3, None)?;
            let rhs = tape.reshape(rhs, &[bs, n, t])?;
            let scores = tape.bmm(lhs, rhs)?;
            gated_softmax(tape, store, scores, v, b)
        }
        OpParams::SAtt { u4, u5, u6, v, b } => {
            // (xᵀ U4) U5: reduce time, then map channels to T -> [B, N, T]
            let u4 = tape.param(store, u4);
            let u4 = tape.reshape(u4, &[1, t])?;
            let red = tape.contract(u4, x, TIME_AXIS)?;
            let red = tape.reshape(red, &[bs, n, c])?;
            let u5 = tape.param(store, u5);
            let lhs = tape.linear(red, u5, None)?;
            // U6 x: reduce channels -> [B, T, N]
            let u6 = tape.param(store, u6);
            let u6 = tape.reshape(u6, &[c, 1])?;
            let rhs = tape.linear(x, u6, None)?;
            let rhs = tape.reshape(rhs, &[bs, n, t])?;
            let rhs = tape.permute(rhs, &[0, 2, 1])?;
            let scores = tape.bmm(lhs, rhs)?;
            gated_softmax(tape, store, scores, v, b)
        }
        _ => Err(Error::config("attention_matrix needs T-Att or S-Att parameters")),
    }
}

/// `softmax_rows(V * sigmoid(scores + b))` on `[B, P, P]` scores.
fn gated_softmax(tape: &mut Tape, store: &ParamStore, scores: Var, v: ParamId, b: ParamId) -> Result<Var> {
    let (v, b) = (tape.param(store, v), tape.param(store, b));
    let biased = tape.add_trailing(scores, b)?;
    let gated = tape.sigmoid(biased);
    let weighted = tape.mul_trailing(gated, v)?;
    tape.softmax(weighted, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SHAPE: OpShape = OpShape { n: 3, t: 4, c: 2 };

    fn run(kind: OpKind, x: &Tensor) -> (Tensor, Tensor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = OpParams::init(kind, &mut store, &mut rng, "op", SHAPE);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let adj = tape.constant(Tensor::from_fn(&[3, 3], |i| (i % 4) as f64 * 0.25));
        let y = apply_op(&mut tape, &store, kind, &p, xv, adj).unwrap();
        (x.clone(), tape.to_tensor(y))
    }

    #[test]
    fn every_op_preserves_shape() {
        let x = Tensor::from_fn(&[2, 3, 4, 2], |i| (i as f64 * 0.71).cos());
        for kind in OpKind::ALL {
            let (x, y) = run(kind, &x);
            assert_eq!(y.shape(), x.shape(), "{kind}");
        }
    }

    #[test]
    fn zero_and_identity() {
        let x = Tensor::from_fn(&[1, 3, 4, 2], |i| i as f64);
        let (_, z) = run(OpKind::Zero, &x);
        assert!(z.data().iter().all(|v| *v == 0.0));
        let (x, y) = run(OpKind::Identity, &x);
        assert_eq!(x, y);
    }

    #[test]
    fn tconv_is_bounded() {
        let x = Tensor::from_fn(&[1, 3, 4, 2], |i| (i as f64 - 10.0) * 3.0);
        let (_, y) = run(OpKind::TConv, &x);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn mismatched_params_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = OpParams::init(OpKind::Gcn, &mut store, &mut rng, "op", SHAPE);
        let mut tape = Tape::new();
        let x = tape.zeros(&[1, 3, 4, 2]);
        let adj = tape.zeros(&[3, 3]);
        assert!(apply_op(&mut tape, &store, OpKind::SAtt, &p, x, adj).is_err());
        let bad_adj = tape.zeros(&[2, 2]);
        assert!(apply_op(&mut tape, &store, OpKind::Gcn, &p, x, bad_adj).is_err());
    }

    #[test]
    fn tatt_rows_are_distributions() {
        let x = Tensor::from_fn(&[1, 3, 4, 2], |i| (i as f64).sin());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = OpParams::init(OpKind::TAtt, &mut store, &mut rng, "op", SHAPE);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let a = attention_matrix(&mut tape, &store, &p, xv).unwrap();
        let att = tape.to_tensor(a);
        assert_eq!(att.shape(), &[1, 4, 4]);
        for row in att.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
