//! Parallel multi-scale decomposition of the input window.
//!
//! Scale 1 is `ReLU(conv(x))` at full length; scale `k > 1` is
//! `avgpool2(ReLU(conv(scale k-1)))`. Convolutions run along the time axis
//! only, with one kernel shared by every variable, so variables never mix.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, ParamId, ParamKind, ParamStore};
use crate::tensor::{Tape, Var};

/// Temporal kernel width of every decomposition layer.
pub const KERNEL: usize = 3;

/// Axis layout of activations: `[batch, variable, time, channel]`.
pub const TIME_AXIS: usize = 2;

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecompositionParams {
    pub layers: Vec<ConvLayer>,
}

/// One scale's representation, `[B, N, T / 2^(k-1), c]`.
#[derive(Debug, Clone, Copy)]
pub struct ScaleSeries {
    /// 1-based scale index.
    pub k: usize,
    pub tensor: Var,
}

impl DecompositionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        scales: usize,
        in_channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        if scales == 0 {
            return Err(Error::config("decomposition needs at least one scale"));
        }
        let layers = (0..scales)
            .map(|k| {
                let cin = if k == 0 { in_channels } else { hidden };
                let fan_in = KERNEL * cin;
                let w = store.add(
                    format!("decomp.{}.w", k + 1),
                    ParamKind::Weight,
                    uniform_fan_in(rng, &[KERNEL, cin, hidden], fan_in),
                );
                let b = store.add(
                    format!("decomp.{}.b", k + 1),
                    ParamKind::Weight,
                    uniform_fan_in(rng, &[hidden], fan_in),
                );
                ConvLayer { w, b }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn scales(&self) -> usize {
        self.layers.len()
    }
}

/// Produces the K scale series of `x: [B, N, T, C_in]`.
pub fn decompose(tape: &mut Tape, store: &ParamStore, params: &DecompositionParams, x: Var) -> Result<Vec<ScaleSeries>> {
    let k_total = params.scales();
    if k_total == 0 {
        return Err(Error::config("decomposition needs at least one scale"));
    }
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("decompose", &shape, &[0, 0, 0, 0]));
    }
    let period = 1usize << (k_total - 1);
    if !shape[TIME_AXIS].is_multiple_of(period) {
        return Err(Error::config(format!(
            "window length {} is not divisible by 2^(K-1) = {period}",
            shape[TIME_AXIS]
        )));
    }
    let mut out = Vec::with_capacity(k_total);
    let mut prev = x;
    for (k, layer) in params.layers.iter().enumerate() {
        let w = tape.param(store, layer.w);
        let b = tape.param(store, layer.b);
        let conv = tape.conv1d(prev, w, b, TIME_AXIS)?;
        let mut h = tape.relu(conv);
        if k > 0 {
            h = tape.avg_pool2(h, TIME_AXIS)?;
        }
        out.push(ScaleSeries { k: k + 1, tensor: h });
        prev = h;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(k: usize) -> (ParamStore, DecompositionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DecompositionParams::init(&mut store, &mut rng, k, 2, 5).unwrap();
        (store, p)
    }

    #[test]
    fn lengths_halve_per_scale() {
        let (store, p) = setup(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 4, 12, 2], |i| (i as f64 * 0.37).sin()));
        let out = decompose(&mut tape, &store, &p, x).unwrap();
        let lens: Vec<usize> = out.iter().map(|s| tape.shape(s.tensor)[2]).collect();
        assert_eq!(lens, [12, 6, 3]);
        for s in &out {
            assert_eq!(tape.shape(s.tensor)[3], 5);
            assert_eq!(tape.shape(s.tensor)[1], 4);
        }
    }

    #[test]
    fn single_scale_keeps_raw_length() {
        let (store, p) = setup(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 12, 2]));
        let out = decompose(&mut tape, &store, &p, x).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(tape.shape(out[0].tensor), &[1, 3, 12, 5]);
    }

    #[test]
    fn indivisible_length_rejected() {
        let (store, p) = setup(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 10, 2]));
        assert!(decompose(&mut tape, &store, &p, x).is_err());
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(DecompositionParams::init(&mut s, &mut rng, 0, 1, 4).is_err());
    }
}
