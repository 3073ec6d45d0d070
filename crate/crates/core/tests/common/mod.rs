//! Shared helpers for the integration tests.
#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalenas_core::params::ParamId;
use scalenas_core::{ParamKind, ParamStore, Result, Tape, Tensor, Var};

/// Central-difference step.
pub const EPS: f64 = 1e-6;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// `sum(y * r)` for a fixed random `r`, so every output entry gets a
/// distinct upstream gradient.
pub fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut g = rng(seed ^ 0x9e37);
    let r = tape.constant(uniform(&mut g, &shape, -1.0, 1.0));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

#[derive(Debug)]
pub struct GradReport {
    pub points: usize,
    pub max_rel: f64,
    pub worst: String,
}

fn eval<F>(store: &ParamStore, f: &F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = f(&mut tape, store).expect("forward");
    tape.scalar(l)
}

/// Compares backprop against central differences at `points` random
/// coordinates drawn from the parameters in `ids`.
pub fn gradcheck_ids<F>(store: &mut ParamStore, ids: &[ParamId], points: usize, seed: u64, f: F) -> GradReport
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.set_trainable(None);
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store).expect("forward");
    tape.backward(loss, store).expect("backward");
    let coords: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    let mut g = rng(seed);
    let picked: Vec<usize> = if coords.len() <= points {
        (0..coords.len()).collect()
    } else {
        sample(&mut g, coords.len(), points).into_vec()
    };
    let mut report = GradReport {
        points: picked.len(),
        max_rel: 0.0,
        worst: String::new(),
    };
    for k in picked {
        let (id, i) = coords[k];
        let analytic = store.get(id).grad().expect("gradient")[i];
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + EPS;
        let lp = eval(store, &f);
        store.get_mut(id).data_mut()[i] = orig - EPS;
        let lm = eval(store, &f);
        store.get_mut(id).data_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * EPS);
        let e = rel_err(analytic, numeric);
        if e > report.max_rel || report.worst.is_empty() {
            report.max_rel = report.max_rel.max(e);
            report.worst = format!("{}[{i}]: analytic {analytic:e}, numeric {numeric:e}", store.entry(id).name);
        }
    }
    report
}

/// [`gradcheck_ids`] over every parameter in the store.
pub fn gradcheck<F>(store: &mut ParamStore, points: usize, seed: u64, f: F) -> GradReport
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    gradcheck_ids(store, &ids, points, seed, f)
}

/// Adds each input as a weight parameter named `in{i}`.
pub fn inputs(store: &mut ParamStore, tensors: Vec<Tensor>) -> Vec<ParamId> {
    tensors
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), ParamKind::Weight, t))
        .collect()
}

pub fn assert_grad(name: &str, r: &GradReport, tol: f64, min_points: usize) {
    assert!(r.points >= min_points, "{name}: only {} points checked", r.points);
    assert!(r.max_rel <= tol, "{name}: max rel err {:e} > {tol:e} at {}", r.max_rel, r.worst);
}
