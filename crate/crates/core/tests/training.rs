//! Two-stage training behaviour on small synthetic data.

mod common;

use scalenas_core::data::{gen_synthetic, make_windows, MtsDataset, SyntheticSpec};
use scalenas_core::model::{l2_loss, Model};
use scalenas_core::optim::{Optimizer, OptimizerKind};
use scalenas_core::search::{ChosenEdge, DiscreteArchitecture, DiscreteCell, DiscreteScale, OpKind};
use scalenas_core::train::{dims_of, search_stage, train_stage};
use scalenas_core::{Ablation, Error, ParamKind, ParamStore, Split, Tape, TrainConfig};

fn dataset() -> MtsDataset {
    let spec = SyntheticSpec {
        n_vars: 4,
        length: 160,
        seed: 3,
        ..Default::default()
    };
    make_windows(gen_synthetic(&spec).unwrap().series, 4, 4, [0.7, 0.2, 0.1]).unwrap()
}

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data.input_len = 4;
    cfg.data.horizon = 4;
    cfg.set_scales(2).unwrap();
    cfg.model.cells_per_scale = vec![1, 1];
    cfg.model.nodes_per_cell = 3;
    cfg.model.hidden_dim = 4;
    cfg.model.embed_dim = 3;
    cfg.model.tau = 2;
    cfg.optim.search_epochs = 2;
    cfg.optim.train_epochs = 2;
    cfg.optim.batch_size = 16;
    cfg
}

fn arch_values(store: &ParamStore, kind: ParamKind) -> Vec<Vec<f64>> {
    store.ids_of(kind).map(|id| store.get(id).data().to_vec()).collect()
}

#[test]
fn zero_arch_rate_freezes_alphas() {
    let ds = dataset();
    let mut cfg = tiny();
    cfg.optim.lr_arch = 0.0;
    let out = search_stage(&cfg, &ds, &mut |_| {}).unwrap();
    // the initial alphas come from the same init stream
    let mut store = ParamStore::new();
    let mut rng = scalenas_core::train::stream_rng(cfg.seed, scalenas_core::train::streams::SEARCH_INIT);
    Model::relaxed(&cfg, dims_of(&ds), &mut store, &mut rng).unwrap();
    assert_eq!(arch_values(&out.store, ParamKind::Arch), arch_values(&store, ParamKind::Arch));
    assert_ne!(arch_values(&out.store, ParamKind::Weight), arch_values(&store, ParamKind::Weight));
}

#[test]
fn search_and_train_are_deterministic() {
    let ds = dataset();
    let cfg = tiny();
    let a = search_stage(&cfg, &ds, &mut |_| {}).unwrap();
    let b = search_stage(&cfg, &ds, &mut |_| {}).unwrap();
    assert_eq!(a.arch, b.arch);
    assert_eq!(a.log, b.log);
    assert_eq!(a.valid_curve, b.valid_curve);
    let ta = train_stage(&cfg, &ds, &a.arch, &mut |_| {}).unwrap();
    let tb = train_stage(&cfg, &ds, &a.arch, &mut |_| {}).unwrap();
    assert_eq!(ta.log, tb.log);
    for (x, y) in ta.store.entries().iter().zip(tb.store.entries()) {
        assert_eq!(x.tensor.data(), y.tensor.data(), "{}", x.name);
    }
    let mut other = cfg.clone();
    other.seed = 1;
    let c = search_stage(&other, &ds, &mut |_| {}).unwrap();
    assert_ne!(a.valid_curve, c.valid_curve);
}

#[test]
fn steps_touch_only_their_partition() {
    let ds = dataset();
    let cfg = tiny();
    let mut store = ParamStore::new();
    let model = Model::relaxed(&cfg, dims_of(&ds), &mut store, &mut common::rng(0)).unwrap();
    let starts: Vec<usize> = ds.windows(Split::Train).take(8).collect();
    for kind in [ParamKind::Weight, ParamKind::Arch] {
        let other = if kind == ParamKind::Weight { ParamKind::Arch } else { ParamKind::Weight };
        store.set_trainable(None);
        store.zero_grad();
        let (x, y) = ds.batch(&starts);
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x), tape.constant(y));
        let pred = model.forward(&mut tape, &store, xv).unwrap();
        let loss = l2_loss(&mut tape, pred, yv).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let before = (arch_values(&store, kind), arch_values(&store, other));
        Optimizer::new(OptimizerKind::Sgd, kind, 0.1).step(&mut store).unwrap();
        assert_ne!(arch_values(&store, kind), before.0, "{kind:?} moved");
        assert_eq!(arch_values(&store, other), before.1, "{other:?} untouched");
    }
}

#[test]
fn all_zero_architecture_learns_the_target_mean() {
    let ds = dataset();
    let mut cfg = tiny();
    cfg.optim.optimizer = OptimizerKind::Adam;
    cfg.optim.lr_weights = 0.01;
    cfg.optim.train_epochs = 300;
    let zero = DiscreteCell {
        edges: [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|&(from, to)| ChosenEdge { from, to, op: OpKind::Zero })
            .collect(),
    };
    let scale = DiscreteScale {
        cells: vec![zero],
        alpha: Vec::new(),
    };
    let arch = DiscreteArchitecture {
        nodes_per_cell: 3,
        scales: vec![scale.clone(), scale],
    };
    let out = train_stage(&cfg, &ds, &arch, &mut |_| {}).unwrap();
    let starts: Vec<usize> = ds.windows(Split::Train).collect();
    let (x, y) = ds.batch(&starts);
    let pred = out.model.predict(&out.store, &x).unwrap();
    let h = ds.horizon();
    let rows = y.numel() / h;
    for step in 0..h {
        let mean: f64 = y.data().iter().skip(step).step_by(h).sum::<f64>() / rows as f64;
        for p in pred.data().iter().skip(step).step_by(h) {
            assert!((p - mean).abs() < 2e-2, "step {step}: {p} vs {mean}");
        }
    }
}

#[test]
fn shared_graph_mode_repeats_one_adjacency() {
    let ds = dataset();
    let mut cfg = tiny();
    cfg.set_scales(3).unwrap();
    cfg.data.input_len = 4;
    cfg.apply_ablation(Ablation::Shared).unwrap();
    let mut store = ParamStore::new();
    let model = Model::relaxed(&cfg, dims_of(&ds), &mut store, &mut common::rng(1)).unwrap();
    let adj = model.adjacency(&store).unwrap();
    assert_eq!(adj.len(), 3);
    assert_eq!(adj[0], adj[1]);
    assert_eq!(adj[1], adj[2]);
}

#[test]
fn non_shared_graphs_add_parameters() {
    let ds = dataset();
    let cfg = tiny();
    let mut ns = cfg.clone();
    ns.apply_ablation(Ablation::NonShared).unwrap();
    let count = |c: &TrainConfig| {
        let mut store = ParamStore::new();
        Model::relaxed(c, dims_of(&ds), &mut store, &mut common::rng(2)).unwrap();
        store.count(ParamKind::Weight)
    };
    assert!(count(&ns) > count(&cfg));
    let mut both = cfg.clone();
    both.apply_ablation(Ablation::Shared).unwrap();
    assert!(both.apply_ablation(Ablation::NonShared).is_err());
}

#[test]
fn single_scale_keeps_raw_resolution() {
    let ds = dataset();
    let mut cfg = tiny();
    cfg.set_scales(1).unwrap();
    let out = search_stage(&cfg, &ds, &mut |_| {}).unwrap();
    assert_eq!(out.model.scales(), 1);
    assert_eq!(out.arch.scales.len(), 1);
    let mut tape = Tape::new();
    let (x, _) = ds.batch(&[0, 1]);
    let xv = tape.constant(x);
    let parts = scalenas_core::decomposition::decompose(&mut tape, &out.store, out.model.decomposition(), xv).unwrap();
    assert_eq!(parts.len(), 1);
    assert_eq!(tape.shape(parts[0].tensor)[2], 4);
}

#[test]
fn divergence_is_reported() {
    let ds = dataset();
    let mut cfg = tiny();
    cfg.optim.lr_weights = 1e150;
    cfg.optim.search_epochs = 5;
    match search_stage(&cfg, &ds, &mut |_| {}) {
        Err(Error::NonFiniteLoss { stage, .. }) => assert_eq!(stage, "search"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.valid_curve)),
    }
    let arch = search_stage(&tiny(), &ds, &mut |_| {}).unwrap().arch;
    match train_stage(&cfg, &ds, &arch, &mut |_| {}) {
        Err(Error::NonFiniteLoss { stage, lr, .. }) => assert_eq!((stage, lr), ("train", 1e150)),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.valid_curve)),
    }
}

#[test]
fn too_few_windows_for_a_split() {
    let spec = SyntheticSpec {
        n_vars: 2,
        blocks: 1,
        length: 9,
        ..Default::default()
    };
    let ds = make_windows(gen_synthetic(&spec).unwrap().series, 4, 4, [0.7, 0.2, 0.1]).unwrap();
    assert!(search_stage(&tiny(), &ds, &mut |_| {}).is_err());
}
