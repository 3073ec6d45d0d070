//! Search stage (alternating weight / architecture steps) and train stage
//! (fixed architecture, fresh weights), plus evaluation.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{denormalize, MtsDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_forecasts, Metrics};
use crate::model::{l2_loss, Model, ModelDims};
use crate::optim::Optimizer;
use crate::params::{ParamKind, ParamStore};
use crate::search::DiscreteArchitecture;
use crate::tensor::Tape;

/// Independent random streams derived from the run seed.
pub mod streams {
    pub const SEARCH_INIT: u64 = 0;
    pub const SEARCH_BATCHES: u64 = 1;
    pub const TRAIN_INIT: u64 = 2;
    pub const TRAIN_BATCHES: u64 = 3;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogStage {
    /// One search iteration: train-batch and valid-batch losses.
    Search,
    /// Full validation loss after a search epoch (iteration 0 is the start).
    SearchEval,
    Train,
    TrainEval,
}

impl LogStage {
    pub fn name(self) -> &'static str {
        match self {
            LogStage::Search => "search",
            LogStage::SearchEval => "search_eval",
            LogStage::Train => "train",
            LogStage::TrainEval => "train_eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: LogStage,
    pub train_loss: Option<f64>,
    pub valid_loss: Option<f64>,
}

/// Progress notice emitted after each epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub stage: LogStage,
    pub epoch: usize,
    pub epochs: usize,
    pub valid_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub arch: DiscreteArchitecture,
    pub log: Vec<LogRow>,
    /// Full validation loss before training and after every epoch.
    pub valid_curve: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub log: Vec<LogRow>,
    pub valid_curve: Vec<f64>,
}

pub fn dims_of(ds: &MtsDataset) -> ModelDims {
    ModelDims {
        n_vars: ds.n_vars(),
        in_channels: ds.channels(),
        input_len: ds.input_len(),
        horizon: ds.horizon(),
    }
}

/// One epoch of shuffled batches over `range`.
pub fn epoch_batches(rng: &mut ChaCha8Rng, range: Range<usize>, batch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = range.collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Endless stream of batches, reshuffled on every pass.
struct BatchCycle {
    range: Range<usize>,
    batch: usize,
    queue: Vec<Vec<usize>>,
}

impl BatchCycle {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.queue.is_empty() {
            self.queue = epoch_batches(rng, self.range.clone(), self.batch);
            self.queue.reverse();
        }
        self.queue.pop().expect("non-empty split")
    }
}

/// Batch loss for the given windows.
pub fn batch_loss(model: &Model, store: &ParamStore, ds: &MtsDataset, starts: &[usize]) -> Result<f64> {
    let (x, y) = ds.batch(starts);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let pred = model.forward(&mut tape, store, xv)?;
    let loss = l2_loss(&mut tape, pred, yv)?;
    Ok(tape.scalar(loss))
}

/// Mean per-window loss over a whole split, evaluated in fixed order.
pub fn split_loss(model: &Model, store: &ParamStore, ds: &MtsDataset, split: Split, batch: usize) -> Result<f64> {
    let windows: Vec<usize> = ds.windows(split).collect();
    if windows.is_empty() {
        return Err(Error::data(format!("{split:?} split is empty")));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(batch.max(1)) {
        total += batch_loss(model, store, ds, chunk)? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// One gradient step of `opt` on the batch `starts`; returns the batch loss.
fn step(
    model: &Model,
    store: &mut ParamStore,
    ds: &MtsDataset,
    starts: &[usize],
    opt: &mut Optimizer,
    stage: &'static str,
    iteration: usize,
) -> Result<f64> {
    store.set_trainable(Some(opt.partition()));
    store.zero_grad();
    let (x, y) = ds.batch(starts);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let pred = model.forward(&mut tape, store, xv)?;
    let loss_v = l2_loss(&mut tape, pred, yv)?;
    let loss = tape.scalar(loss_v);
    tape.backward(loss_v, store)?;
    let (wn, an) = (store.grad_norm(ParamKind::Weight), store.grad_norm(ParamKind::Arch));
    if !loss.is_finite() || !wn.is_finite() || !an.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage,
            iteration,
            lr: opt.lr(),
            weight_grad_norm: wn,
            arch_grad_norm: an,
        });
    }
    opt.step(store)?;
    Ok(loss)
}

fn require_split(ds: &MtsDataset, split: Split) -> Result<Range<usize>> {
    let r = ds.windows(split);
    if r.is_empty() {
        return Err(Error::data(format!("{split:?} split has no windows")));
    }
    Ok(r)
}

/// Alternates one weight step on a training batch with one architecture
/// step on a validation batch, then discretises.
pub fn search_stage(cfg: &TrainConfig, ds: &MtsDataset, on_epoch: &mut dyn FnMut(EpochReport)) -> Result<SearchOutcome> {
    cfg.validate()?;
    let train = require_split(ds, Split::Train)?;
    let valid = require_split(ds, Split::Valid)?;
    let mut store = ParamStore::new();
    let mut init = stream_rng(cfg.seed, streams::SEARCH_INIT);
    let model = Model::relaxed(cfg, dims_of(ds), &mut store, &mut init)?;
    let mut rng = stream_rng(cfg.seed, streams::SEARCH_BATCHES);
    let o = &cfg.optim;
    let mut w_opt = Optimizer::new(o.optimizer, ParamKind::Weight, o.lr_weights);
    let mut a_opt = Optimizer::new(o.optimizer, ParamKind::Arch, o.lr_arch);
    let mut valid_batches = BatchCycle {
        range: valid,
        batch: o.batch_size,
        queue: Vec::new(),
    };
    let mut log = Vec::new();
    let v0 = split_loss(&model, &store, ds, Split::Valid, o.batch_size)?;
    log.push(eval_row(0, LogStage::SearchEval, v0));
    let mut curve = alloc::vec![v0];
    let mut iteration = 0;
    for epoch in 1..=o.search_epochs {
        for batch in epoch_batches(&mut rng, train.clone(), o.batch_size) {
            iteration += 1;
            let vb = valid_batches.next(&mut rng);
            let tl = step(&model, &mut store, ds, &batch, &mut w_opt, "search", iteration)?;
            let vl = step(&model, &mut store, ds, &vb, &mut a_opt, "search", iteration)?;
            log.push(LogRow {
                iteration,
                stage: LogStage::Search,
                train_loss: Some(tl),
                valid_loss: Some(vl),
            });
        }
        let v = split_loss(&model, &store, ds, Split::Valid, o.batch_size)?;
        log.push(eval_row(iteration, LogStage::SearchEval, v));
        curve.push(v);
        on_epoch(EpochReport {
            stage: LogStage::SearchEval,
            epoch,
            epochs: o.search_epochs,
            valid_loss: v,
        });
    }
    store.set_trainable(None);
    let arch = model.discretize(&store)?;
    Ok(SearchOutcome {
        model,
        store,
        arch,
        log,
        valid_curve: curve,
    })
}

fn eval_row(iteration: usize, stage: LogStage, valid: f64) -> LogRow {
    LogRow {
        iteration,
        stage,
        train_loss: None,
        valid_loss: Some(valid),
    }
}

/// Trains a freshly initialised fixed-architecture model on the training
/// split.
pub fn train_stage(
    cfg: &TrainConfig,
    ds: &MtsDataset,
    arch: &DiscreteArchitecture,
    on_epoch: &mut dyn FnMut(EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = require_split(ds, Split::Train)?;
    let has_valid = !ds.windows(Split::Valid).is_empty();
    let mut store = ParamStore::new();
    let mut init = stream_rng(cfg.seed, streams::TRAIN_INIT);
    let model = Model::fixed(cfg, dims_of(ds), arch, &mut store, &mut init)?;
    let mut rng = stream_rng(cfg.seed, streams::TRAIN_BATCHES);
    let o = &cfg.optim;
    let mut opt = Optimizer::new(o.optimizer, ParamKind::Weight, o.lr_weights);
    let mut log = Vec::new();
    let mut curve = Vec::new();
    let mut iteration = 0;
    if has_valid {
        let v0 = split_loss(&model, &store, ds, Split::Valid, o.batch_size)?;
        log.push(eval_row(0, LogStage::TrainEval, v0));
        curve.push(v0);
    }
    for epoch in 1..=o.train_epochs {
        for batch in epoch_batches(&mut rng, train.clone(), o.batch_size) {
            iteration += 1;
            let tl = step(&model, &mut store, ds, &batch, &mut opt, "train", iteration)?;
            log.push(LogRow {
                iteration,
                stage: LogStage::Train,
                train_loss: Some(tl),
                valid_loss: None,
            });
        }
        if has_valid {
            let v = split_loss(&model, &store, ds, Split::Valid, o.batch_size)?;
            log.push(eval_row(iteration, LogStage::TrainEval, v));
            curve.push(v);
            on_epoch(EpochReport {
                stage: LogStage::TrainEval,
                epoch,
                epochs: o.train_epochs,
                valid_loss: v,
            });
        }
    }
    store.set_trainable(None);
    Ok(TrainOutcome {
        model,
        store,
        log,
        valid_curve: curve,
    })
}

/// Denormalised forecasts and true values for every window of `split`,
/// row-major `[windows, N, horizon]`.
pub fn forecast_split(
    model: &Model,
    store: &ParamStore,
    ds: &MtsDataset,
    split: Split,
    batch: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if model.dims() != dims_of(ds) {
        let (m, d) = (model.dims(), dims_of(ds));
        return Err(Error::config(format!(
            "model expects {} variables x {} channels, dataset has {} x {}",
            m.n_vars, m.in_channels, d.n_vars, d.in_channels
        )));
    }
    let windows: Vec<usize> = ds.windows(split).collect();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for chunk in windows.chunks(batch.max(1)) {
        let (x, _) = ds.batch(chunk);
        let p = model.predict(store, &x)?;
        pred.extend(denormalize(&p, ds.stats())?.into_data());
        truth.extend(ds.raw_targets(chunk));
    }
    Ok((pred, truth))
}

/// Metrics of the model on one split.
pub fn evaluate(model: &Model, store: &ParamStore, ds: &MtsDataset, split: Split, batch: usize) -> Result<Metrics> {
    let (pred, truth) = forecast_split(model, store, ds, split, batch)?;
    if pred.is_empty() {
        return Err(Error::data(format!("{split:?} split has no windows")));
    }
    evaluate_forecasts(&pred, &truth, ds.n_vars(), ds.horizon())
}

/// Metrics of the repeat-last-value forecaster on one split.
pub fn persistence_metrics(ds: &MtsDataset, split: Split) -> Result<Metrics> {
    let windows: Vec<usize> = ds.windows(split).collect();
    if windows.is_empty() {
        return Err(Error::data(format!("{split:?} split has no windows")));
    }
    evaluate_forecasts(
        &ds.persistence(&windows),
        &ds.raw_targets(&windows),
        ds.n_vars(),
        ds.horizon(),
    )
}
