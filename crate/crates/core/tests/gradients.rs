//! Finite-difference checks of every differentiable building block.

mod common;

use common::*;
use scalenas_core::decomposition::{decompose, DecompositionParams};
use scalenas_core::graph::GraphLearner;
use scalenas_core::model::{l2_loss, FusionHead};
use scalenas_core::params::ParamId;
use scalenas_core::search::{apply_op, OpKind, OpParams, OpShape};
use scalenas_core::{GraphMode, Model, ModelDims, ParamKind, ParamStore, Result, Tape, Tensor, TrainConfig, Var};

const TOL: f64 = 1e-4;
const POINTS: usize = 12;

/// Checks `f` applied to fresh inputs of the given shapes.
fn check_prim(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let mut g = rng(name.len() as u64);
    let mut store = ParamStore::new();
    let ids = inputs(&mut store, shapes.iter().map(|s| uniform(&mut g, s, lo, hi)).collect());
    let r = gradcheck(&mut store, POINTS, 11, |tape, store| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let y = f(tape, &vars)?;
        probe(tape, y, 5)
    });
    assert_grad(name, &r, TOL, 10);
}

#[test]
fn add_sub_mul() {
    check_prim("add", &[&[3, 4], &[3, 4]], -1.0, 1.0, |t, v| t.add(v[0], v[1]));
    check_prim("sub", &[&[3, 4], &[3, 4]], -1.0, 1.0, |t, v| t.sub(v[0], v[1]));
    check_prim("mul", &[&[3, 4], &[3, 4]], -1.0, 1.0, |t, v| t.mul(v[0], v[1]));
}

#[test]
fn scale_and_shift() {
    check_prim("scale", &[&[12]], -1.0, 1.0, |t, v| Ok(t.scale(v[0], -2.5)));
    check_prim("add_scalar", &[&[12]], -1.0, 1.0, |t, v| Ok(t.add_scalar(v[0], 0.75)));
}

#[test]
fn trailing_broadcasts() {
    check_prim("add_trailing", &[&[2, 3, 4], &[3, 4]], -1.0, 1.0, |t, v| t.add_trailing(v[0], v[1]));
    check_prim("mul_trailing", &[&[2, 3, 4], &[3, 4]], -1.0, 1.0, |t, v| t.mul_trailing(v[0], v[1]));
}

#[test]
fn matrix_products() {
    check_prim("matmul", &[&[3, 4], &[4, 5]], -1.0, 1.0, |t, v| t.matmul(v[0], v[1]));
    check_prim("bmm", &[&[2, 3, 4], &[2, 4, 2]], -1.0, 1.0, |t, v| t.bmm(v[0], v[1]));
    check_prim("linear", &[&[2, 3, 4], &[4, 5], &[5]], -1.0, 1.0, |t, v| t.linear(v[0], v[1], Some(v[2])));
    check_prim("linear_nobias", &[&[2, 3, 4], &[4, 5]], -1.0, 1.0, |t, v| t.linear(v[0], v[1], None));
}

#[test]
fn convolution_and_pooling() {
    check_prim("conv1d_time", &[&[2, 2, 5, 3], &[3, 3, 2], &[2]], -1.0, 1.0, |t, v| {
        t.conv1d(v[0], v[1], v[2], 2)
    });
    check_prim("conv1d_k5", &[&[1, 6, 2], &[5, 2, 3], &[3]], -1.0, 1.0, |t, v| t.conv1d(v[0], v[1], v[2], 1));
    check_prim("avg_pool2", &[&[2, 3, 4, 2]], -1.0, 1.0, |t, v| t.avg_pool2(v[0], 2));
}

#[test]
fn layout_ops() {
    check_prim("concat", &[&[2, 3, 2], &[2, 3, 4]], -1.0, 1.0, |t, v| t.concat(&[v[0], v[1]], 2));
    check_prim("reshape", &[&[2, 3, 4]], -1.0, 1.0, |t, v| t.reshape(v[0], &[6, 4]));
    check_prim("permute", &[&[2, 3, 4]], -1.0, 1.0, |t, v| t.permute(v[0], &[2, 0, 1]));
    check_prim("transpose", &[&[3, 5]], -1.0, 1.0, |t, v| t.transpose(v[0]));
}

#[test]
fn activations() {
    check_prim("relu", &[&[4, 4]], -1.0, 1.0, |t, v| Ok(t.relu(v[0])));
    check_prim("tanh", &[&[4, 4]], -2.0, 2.0, |t, v| Ok(t.tanh(v[0])));
    check_prim("sigmoid", &[&[4, 4]], -3.0, 3.0, |t, v| Ok(t.sigmoid(v[0])));
}

#[test]
fn normalisations() {
    check_prim("softmax_last", &[&[3, 5]], -2.0, 2.0, |t, v| t.softmax(v[0], 1));
    check_prim("softmax_mid", &[&[2, 4, 3]], -2.0, 2.0, |t, v| t.softmax(v[0], 1));
    check_prim("normalize_axis", &[&[3, 5]], 0.5, 1.5, |t, v| t.normalize_axis(v[0], 1));
}

#[test]
fn reductions() {
    check_prim("sum", &[&[3, 4]], -1.0, 1.0, |t, v| Ok(t.sum(v[0])));
    check_prim("mean", &[&[3, 4]], -1.0, 1.0, |t, v| Ok(t.mean(v[0])));
}

#[test]
fn contractions() {
    check_prim("contract_shared", &[&[3, 4], &[2, 4, 3, 2]], -1.0, 1.0, |t, v| t.contract(v[0], v[1], 1));
    check_prim("contract_batched", &[&[2, 3, 3], &[2, 2, 3, 2]], -1.0, 1.0, |t, v| {
        t.contract(v[0], v[1], 2)
    });
    check_prim("weighted_sum", &[&[3, 4], &[3, 4], &[3]], -1.0, 1.0, |t, v| {
        t.weighted_sum(&[(0, v[0]), (2, v[1])], v[2])
    });
}

const SHAPE: OpShape = OpShape { n: 3, t: 4, c: 3 };

fn check_op(kind: OpKind) {
    let mut g = rng(kind as u64 + 100);
    let mut store = ParamStore::new();
    let params = OpParams::init(kind, &mut store, &mut g, "op", SHAPE);
    // attention biases start at zero; move them off the initial point
    for id in store.ids().collect::<Vec<_>>() {
        if store.entry(id).name.ends_with(".b") && matches!(kind, OpKind::TAtt | OpKind::SAtt) {
            let t = uniform(&mut g, store.get(id).shape(), -0.5, 0.5);
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
    }
    let x = store.add("x", ParamKind::Weight, uniform(&mut g, &[2, SHAPE.n, SHAPE.t, SHAPE.c], -1.0, 1.0));
    let adj = store.add("adj", ParamKind::Weight, uniform(&mut g, &[SHAPE.n, SHAPE.n], 0.1, 1.0));
    let ids: Vec<ParamId> = store.ids().collect();
    let r = gradcheck_ids(&mut store, &ids, 24, 3, |tape, store| {
        let (xv, av) = (tape.param(store, x), tape.param(store, adj));
        let y = apply_op(tape, store, kind, &params, xv, av)?;
        probe(tape, y, 9)
    });
    assert_grad(kind.name(), &r, TOL, 10);
}

#[test]
fn op_conv_1() {
    check_op(OpKind::Conv1);
}

#[test]
fn op_t_conv() {
    check_op(OpKind::TConv);
}

#[test]
fn op_t_att() {
    check_op(OpKind::TAtt);
}

#[test]
fn op_gcn() {
    check_op(OpKind::Gcn);
}

#[test]
fn op_s_att() {
    check_op(OpKind::SAtt);
}

#[test]
fn op_identity() {
    check_op(OpKind::Identity);
}

#[test]
fn decomposition_layers() {
    let mut g = rng(21);
    let mut store = ParamStore::new();
    let params = DecompositionParams::init(&mut store, &mut g, 3, 2, 3).unwrap();
    let x = store.add("x", ParamKind::Weight, uniform(&mut g, &[2, 2, 8, 2], -1.0, 1.0));
    let r = gradcheck(&mut store, 30, 4, |tape, store| {
        let xv = tape.param(store, x);
        let scales = decompose(tape, store, &params, xv)?;
        let mut total = None;
        for (i, s) in scales.iter().enumerate() {
            let p = probe(tape, s.tensor, i as u64)?;
            total = Some(match total {
                Some(t) => tape.add(t, p)?,
                None => p,
            });
        }
        Ok(total.unwrap())
    });
    assert_grad("decomposition", &r, TOL, 10);
}

/// Moves the 1x1 output affine off `b = 0`, where the final ReLU sits on
/// its kink for every entry the inner ReLU zeroed.
fn off_kink(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.entry(id).name.clone();
        if name.ends_with("out.b") {
            store.get_mut(id).data_mut()[0] = 0.05;
        }
        if name.ends_with("embeddings") {
            for v in store.get_mut(id).data_mut() {
                *v *= 10.0;
            }
        }
    }
}

fn check_graph(mode: GraphMode) {
    let mut g = rng(33);
    let mut store = ParamStore::new();
    let learner = GraphLearner::new(&mut store, &mut g, mode, 2, 5, 4, 3).unwrap();
    off_kink(&mut store);
    let r = gradcheck(&mut store, 30, 8, |tape, store| {
        let set = learner.forward(tape, store)?;
        let mut l = probe(tape, set.basic[0], 1)?;
        for (k, a) in set.scales.iter().enumerate() {
            let p = probe(tape, *a, 2 + k as u64)?;
            l = tape.add(l, p)?;
        }
        Ok(l)
    });
    assert_grad(&format!("graph learner {mode:?}"), &r, TOL, 10);
}

#[test]
fn graph_learner_default() {
    check_graph(GraphMode::PerScaleHeads);
}

#[test]
fn graph_learner_non_shared() {
    check_graph(GraphMode::NonShared);
}

#[test]
fn fusion_head() {
    let mut g = rng(44);
    let mut store = ParamStore::new();
    let (fused, hidden, h) = (5 + 3, 4, 3);
    let head = FusionHead {
        w1: store.add("w1", ParamKind::Weight, uniform(&mut g, &[fused, hidden], -0.5, 0.5)),
        b1: store.add("b1", ParamKind::Weight, uniform(&mut g, &[hidden], -0.5, 0.5)),
        w2: store.add("w2", ParamKind::Weight, uniform(&mut g, &[hidden, h], -0.5, 0.5)),
        b2: store.add("b2", ParamKind::Weight, uniform(&mut g, &[h], -0.5, 0.5)),
    };
    let s1 = store.add("s1", ParamKind::Weight, uniform(&mut g, &[2, 3, 5], -1.0, 1.0));
    let s2 = store.add("s2", ParamKind::Weight, uniform(&mut g, &[2, 3, 3], -1.0, 1.0));
    let r = gradcheck(&mut store, 30, 6, |tape, store| {
        let (a, b) = (tape.param(store, s1), tape.param(store, s2));
        let y = head.apply(tape, store, &[a, b])?;
        probe(tape, y, 3)
    });
    assert_grad("fusion head", &r, TOL, 10);
}

#[test]
fn l2_loss_gradient() {
    let mut g = rng(55);
    let mut store = ParamStore::new();
    let ids = inputs(
        &mut store,
        vec![uniform(&mut g, &[2, 3, 2], -1.0, 1.0), uniform(&mut g, &[2, 3, 2], -1.0, 1.0)],
    );
    let r = gradcheck(&mut store, POINTS, 2, |tape, store| {
        let (p, t) = (tape.param(store, ids[0]), tape.param(store, ids[1]));
        l2_loss(tape, p, t)
    });
    assert_grad("l2 loss", &r, TOL, 10);
}

/// Tiny relaxed model: N=3, T=4, K=2, M=3; 20 coordinates drawn from both
/// partitions.
#[test]
fn end_to_end_tiny_assembly() {
    let mut cfg = TrainConfig::default();
    cfg.data.input_len = 4;
    cfg.data.horizon = 2;
    cfg.set_scales(2).unwrap();
    cfg.model.cells_per_scale = vec![1, 1];
    cfg.model.nodes_per_cell = 3;
    cfg.model.hidden_dim = 3;
    cfg.model.embed_dim = 3;
    cfg.model.tau = 2;
    let dims = ModelDims {
        n_vars: 3,
        in_channels: 2,
        input_len: 4,
        horizon: 2,
    };
    let mut g = rng(66);
    let mut store = ParamStore::new();
    let model = Model::relaxed(&cfg, dims, &mut store, &mut g).unwrap();
    off_kink(&mut store);
    // non-uniform logits so the mixture weights differ
    for id in store.ids_of(ParamKind::Arch).collect::<Vec<_>>() {
        let t = uniform(&mut g, store.get(id).shape(), -1.0, 1.0);
        store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    let x = Tensor::from_fn(&[2, 3, 4, 2], |i| ((i * 37 % 17) as f64 / 8.0) - 1.0);
    let y = Tensor::from_fn(&[2, 3, 2], |i| (i as f64 * 0.3).sin());
    let f = |tape: &mut Tape, store: &ParamStore| {
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let p = model.forward(tape, store, xv)?;
        l2_loss(tape, p, yv)
    };
    let weights: Vec<ParamId> = store.ids_of(ParamKind::Weight).collect();
    let arch: Vec<ParamId> = store.ids_of(ParamKind::Arch).collect();
    let rw = gradcheck_ids(&mut store, &weights, 10, 12, f);
    let ra = gradcheck_ids(&mut store, &arch, 10, 13, f);
    assert_eq!(rw.points + ra.points, 20);
    assert_grad("end-to-end weights", &rw, 1e-3, 10);
    assert_grad("end-to-end arch", &ra, 1e-3, 10);
}

/// The harness must notice a dependence the tape does not see.
#[test]
fn harness_detects_hidden_dependence() {
    let mut store = ParamStore::new();
    let ids = inputs(&mut store, vec![Tensor::from_fn(&[12], |i| 0.1 * i as f64 + 0.3)]);
    let r = gradcheck(&mut store, POINTS, 1, |tape, store| {
        let v = tape.param(store, ids[0]);
        // squares through a constant copy: true gradient 2x, tape sees x
        let c = tape.constant(store.get(ids[0]).clone());
        let y = tape.mul(v, c)?;
        Ok(tape.sum(y))
    });
    assert!(r.max_rel > 0.4, "{r:?}");
}
