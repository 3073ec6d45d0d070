//! Series ingestion contracts, sliding windows, normalisation and the
//! synthetic planted-graph generator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// A complete, regularly sampled multivariate series.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    /// Unix seconds when `clock` is set, plain step indices otherwise.
    timestamps: Vec<i64>,
    clock: bool,
    interval: i64,
    /// Row-major `[len, n_vars]`.
    values: Vec<f64>,
    n_vars: usize,
}

impl RawSeries {
    /// Validates regular spacing and finiteness. With `interval = None` the
    /// spacing is taken from the first two rows (a single row gets 1).
    pub fn new(
        timestamps: Vec<i64>,
        clock: bool,
        interval: Option<i64>,
        values: Vec<f64>,
        n_vars: usize,
    ) -> Result<Self> {
        if n_vars == 0 {
            return Err(Error::data("series has no variables"));
        }
        if values.len() != timestamps.len() * n_vars {
            return Err(Error::data(format!(
                "{} values do not fill {} rows of {} variables",
                values.len(),
                timestamps.len(),
                n_vars
            )));
        }
        let interval = match interval {
            Some(i) => i,
            None if timestamps.len() >= 2 => timestamps[1] - timestamps[0],
            None => 1,
        };
        if interval <= 0 {
            return Err(Error::DuplicateTimestamp { row: 1 });
        }
        for (row, w) in timestamps.windows(2).enumerate() {
            let d = w[1] - w[0];
            if d <= 0 {
                return Err(Error::DuplicateTimestamp { row: row + 1 });
            }
            if d != interval {
                return Err(Error::TimestampGap {
                    row: row + 1,
                    expected: w[0] + interval,
                    found: w[1],
                });
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: i / n_vars,
                col: i % n_vars,
            });
        }
        Ok(Self {
            timestamps,
            clock,
            interval,
            values,
            n_vars,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn interval(&self) -> i64 {
        self.interval
    }

    pub fn has_clock(&self) -> bool {
        self.clock
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, var: usize) -> f64 {
        self.values[row * self.n_vars + var]
    }

    /// Fraction of the day in `[0, 1)` for each row, when timestamps carry a clock.
    pub fn time_of_day(&self) -> Option<Vec<f64>> {
        self.clock.then(|| {
            self.timestamps
                .iter()
                .map(|t| t.rem_euclid(SECONDS_PER_DAY) as f64 / SECONDS_PER_DAY as f64)
                .collect()
        })
    }
}

/// Per-variable z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation over `rows`.
    pub fn fit(series: &RawSeries, rows: Range<usize>) -> Result<Self> {
        let n = series.n_vars();
        let count = rows.len() as f64;
        if rows.is_empty() {
            return Err(Error::data("cannot fit normalisation on zero rows"));
        }
        let mut mean = vec![0.0; n];
        for r in rows.clone() {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += series.value(r, j);
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for r in rows {
            for (j, v) in var.iter_mut().enumerate() {
                let d = series.value(r, j) - mean[j];
                *v += d * d;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| libm::sqrt(v / count)).collect();
        if let Some(j) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::data(format!("variable {j} is constant over the training rows")));
        }
        Ok(Self { mean, std })
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, value: f64, var: usize) -> f64 {
        (value - self.mean[var]) / self.std[var]
    }

    pub fn denormalize_value(&self, value: f64, var: usize) -> f64 {
        value * self.std[var] + self.mean[var]
    }
}

/// Maps normalised predictions `[.., N, h]` back to the data scale.
pub fn denormalize(pred: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let shape = pred.shape();
    if shape.len() < 2 || shape[shape.len() - 2] != stats.n_vars() {
        return Err(Error::shape("denormalize", shape, &[stats.n_vars()]));
    }
    let h = shape[shape.len() - 1];
    let n = stats.n_vars();
    let data = pred
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| stats.denormalize_value(*v, (i / h) % n))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Inverse of [`denormalize`].
pub fn normalize(values: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let shape = values.shape();
    if shape.len() < 2 || shape[shape.len() - 2] != stats.n_vars() {
        return Err(Error::shape("normalize", shape, &[stats.n_vars()]));
    }
    let h = shape[shape.len() - 1];
    let n = stats.n_vars();
    let data = values
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| stats.normalize(*v, (i / h) % n))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Number of stride-1 windows of `input_len + horizon` rows.
pub fn window_count(len: usize, input_len: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(input_len + horizon)
}

/// Chronological split of `count` window starts. Boundaries are
/// `floor(count * cumulative fraction)`, the remainder goes to test.
pub fn split_windows(count: usize, split: [f64; 3]) -> [Range<usize>; 3] {
    let cut = |frac: f64| -> usize {
        let v = libm::floor(count as f64 * frac + 1e-9) as usize;
        v.min(count)
    };
    let train_end = cut(split[0]);
    let valid_end = cut(split[0] + split[1]).max(train_end);
    [0..train_end, train_end..valid_end, valid_end..count]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One windowed training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[N, input_len, channels]`; channel 0 holds values, channel 1 the
    /// time of day when present.
    pub input: Tensor,
    /// `[N, horizon]`.
    pub target: Tensor,
}

/// A normalised series with its chronological window splits.
#[derive(Debug, Clone)]
pub struct MtsDataset {
    series: RawSeries,
    normalized: Vec<f64>,
    tod: Option<Vec<f64>>,
    stats: NormStats,
    input_len: usize,
    horizon: usize,
    splits: [Range<usize>; 3],
}

/// Windows a series, fits normalisation on the training rows and applies it
/// everywhere.
///
/// Training rows are every row touched by a training window, inputs and
/// targets alike.
pub fn make_windows(series: RawSeries, input_len: usize, horizon: usize, split: [f64; 3]) -> Result<MtsDataset> {
    let splits = checked_splits(&series, input_len, horizon, split)?;
    if splits[0].is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let stats = NormStats::fit(&series, train_rows(&splits[0], input_len, horizon))?;
    MtsDataset::assemble(series, input_len, horizon, splits, stats)
}

/// Like [`make_windows`] but with statistics fixed in advance, e.g. from a
/// checkpoint.
pub fn make_windows_with_stats(
    series: RawSeries,
    input_len: usize,
    horizon: usize,
    split: [f64; 3],
    stats: NormStats,
) -> Result<MtsDataset> {
    if stats.n_vars() != series.n_vars() {
        return Err(Error::data(format!(
            "statistics cover {} variables but the series has {}",
            stats.n_vars(),
            series.n_vars()
        )));
    }
    let splits = checked_splits(&series, input_len, horizon, split)?;
    MtsDataset::assemble(series, input_len, horizon, splits, stats)
}

/// Rows covered by the windows starting in `starts`.
pub fn train_rows(starts: &Range<usize>, input_len: usize, horizon: usize) -> Range<usize> {
    if starts.is_empty() {
        0..0
    } else {
        starts.start..starts.end - 1 + input_len + horizon
    }
}

fn checked_splits(series: &RawSeries, input_len: usize, horizon: usize, split: [f64; 3]) -> Result<[Range<usize>; 3]> {
    if input_len == 0 || horizon == 0 {
        return Err(Error::config("input length and horizon must be positive"));
    }
    if series.len() < input_len + horizon {
        return Err(Error::data(format!(
            "series has {} rows, fewer than input length + horizon = {}",
            series.len(),
            input_len + horizon
        )));
    }
    Ok(split_windows(window_count(series.len(), input_len, horizon), split))
}

impl MtsDataset {
    fn assemble(
        series: RawSeries,
        input_len: usize,
        horizon: usize,
        splits: [Range<usize>; 3],
        stats: NormStats,
    ) -> Result<Self> {
        let n = series.n_vars();
        let normalized = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| stats.normalize(*v, i % n))
            .collect();
        let tod = series.time_of_day();
        Ok(Self {
            series,
            normalized,
            tod,
            stats,
            input_len,
            horizon,
            splits,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.series.n_vars()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// 1 without a clock, 2 with the time-of-day channel.
    pub fn channels(&self) -> usize {
        if self.tod.is_some() {
            2
        } else {
            1
        }
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn series(&self) -> &RawSeries {
        &self.series
    }

    pub fn window_count(&self) -> usize {
        self.splits[2].end
    }

    pub fn windows(&self, split: Split) -> Range<usize> {
        self.splits[split as usize].clone()
    }

    pub fn sample(&self, start: usize) -> Sample {
        let (input, target) = self.batch(&[start]);
        let n = self.n_vars();
        Sample {
            input: input
                .reshape(vec![n, self.input_len, self.channels()])
                .expect("same size"),
            target: target.reshape(vec![n, self.horizon]).expect("same size"),
        }
    }

    /// Inputs `[B, N, input_len, C]` and normalised targets `[B, N, horizon]`.
    pub fn batch(&self, starts: &[usize]) -> (Tensor, Tensor) {
        let (n, t, h, c) = (self.n_vars(), self.input_len, self.horizon, self.channels());
        let mut input = Vec::with_capacity(starts.len() * n * t * c);
        let mut target = Vec::with_capacity(starts.len() * n * h);
        for &s in starts {
            for j in 0..n {
                for r in s..s + t {
                    input.push(self.normalized[r * n + j]);
                    if let Some(tod) = &self.tod {
                        input.push(tod[r]);
                    }
                }
            }
            for j in 0..n {
                for r in s + t..s + t + h {
                    target.push(self.normalized[r * n + j]);
                }
            }
        }
        let b = starts.len();
        (
            Tensor::new(vec![b, n, t, c], input).expect("sized"),
            Tensor::new(vec![b, n, h], target).expect("sized"),
        )
    }

    /// Unnormalised targets `[B, N, horizon]`, flattened.
    pub fn raw_targets(&self, starts: &[usize]) -> Vec<f64> {
        let (n, t, h) = (self.n_vars(), self.input_len, self.horizon);
        let mut out = Vec::with_capacity(starts.len() * n * h);
        for &s in starts {
            for j in 0..n {
                for r in s + t..s + t + h {
                    out.push(self.series.value(r, j));
                }
            }
        }
        out
    }

    /// Repeat-last-value forecasts `[B, N, horizon]`, flattened.
    pub fn persistence(&self, starts: &[usize]) -> Vec<f64> {
        let (n, t, h) = (self.n_vars(), self.input_len, self.horizon);
        let mut out = Vec::with_capacity(starts.len() * n * h);
        for &s in starts {
            for j in 0..n {
                let last = self.series.value(s + t - 1, j);
                out.extend(core::iter::repeat_n(last, h));
            }
        }
        out
    }
}

/// Generator settings for a desk-scale series with a planted graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_vars: usize,
    pub length: usize,
    /// Variables are split into this many contiguous, fully connected blocks.
    pub blocks: usize,
    /// Sinusoid periods in steps, fastest first.
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Weight of the lagged neighbour average.
    pub coupling: f64,
    /// Lag, in steps, of the neighbour term.
    pub lag: usize,
    /// AR(1) coefficient of the noise process.
    pub persistence: f64,
    /// Standard deviation of the noise process.
    pub noise: f64,
    pub seed: u64,
    pub interval_secs: i64,
    pub start_unix: i64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_vars: 8,
            length: 2000,
            blocks: 2,
            periods: vec![12.0, 288.0],
            amplitudes: vec![1.0, 1.0],
            coupling: 1.0,
            lag: 12,
            persistence: 0.95,
            noise: 1.0,
            seed: 0,
            interval_secs: 300,
            // 2012-03-01T00:00:00Z
            start_unix: 1_330_560_000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(format!("synthetic spec: {msg}")));
        if self.n_vars == 0 {
            return bad("n_vars must be positive");
        }
        if self.length == 0 {
            return bad("length must be positive");
        }
        if self.blocks == 0 || self.blocks > self.n_vars {
            return bad("blocks must be between 1 and n_vars");
        }
        if self.periods.len() != self.amplitudes.len() {
            return bad("periods and amplitudes must have the same length");
        }
        if self.periods.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return bad("periods must be positive");
        }
        if self.amplitudes.iter().any(|a| !a.is_finite()) || !self.coupling.is_finite() {
            return bad("amplitudes and coupling must be finite");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        if !(self.persistence.is_finite() && self.persistence.abs() < 1.0) {
            return bad("persistence must lie in (-1, 1)");
        }
        if self.interval_secs <= 0 {
            return bad("interval_secs must be positive");
        }
        Ok(())
    }

    pub fn block_of(&self, var: usize) -> usize {
        var * self.blocks / self.n_vars
    }

    /// Binary `N x N` planted adjacency with a zero diagonal.
    pub fn planted_adjacency(&self) -> Vec<f64> {
        let n = self.n_vars;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j && self.block_of(i) == self.block_of(j) {
                    a[i * n + j] = 1.0;
                }
            }
        }
        a
    }
}

/// Generated series plus the structure that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticSeries {
    pub series: RawSeries,
    /// Planted adjacency, row-major `N x N`.
    pub adjacency: Vec<f64>,
    /// Sinusoid phase per block and period, `[blocks][periods]`.
    pub phases: Vec<Vec<f64>>,
}

/// Each variable is a sum of block-phased sinusoids and AR(1) noise, plus
/// `coupling` times the average of its planted neighbours' signals `lag`
/// steps earlier.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSeries> {
    spec.validate()?;
    let (n, len, lag) = (spec.n_vars, spec.length, spec.lag);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phases: Vec<Vec<f64>> = (0..spec.blocks)
        .map(|_| spec.periods.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect())
        .collect();

    // base signals over [-lag, len) so the lagged term is defined from t = 0
    let total = len + lag;
    let innov = libm::sqrt(1.0 - spec.persistence * spec.persistence);
    let mut base = vec![0.0; total * n];
    for j in 0..n {
        let ph = &phases[spec.block_of(j)];
        let mut u: f64 = StandardNormal.sample(&mut rng);
        for s in 0..total {
            if s > 0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                u = spec.persistence * u + innov * e;
            }
            let t = s as f64 - lag as f64;
            let mut v = spec.noise * u;
            for ((p, a), phi) in spec.periods.iter().zip(&spec.amplitudes).zip(ph) {
                v += a * libm::sin(2.0 * PI * t / p + phi);
            }
            base[s * n + j] = v;
        }
    }

    let adjacency = spec.planted_adjacency();
    let mut values = vec![0.0; len * n];
    for t in 0..len {
        for i in 0..n {
            let row = &adjacency[i * n..(i + 1) * n];
            let deg: f64 = row.iter().sum();
            let mut v = base[(t + lag) * n + i];
            if deg > 0.0 && spec.coupling != 0.0 {
                let neigh: f64 = (0..n).map(|j| row[j] * base[t * n + j]).sum();
                v += spec.coupling * neigh / deg;
            }
            values[t * n + i] = v;
        }
    }
    let timestamps = (0..len as i64)
        .map(|t| spec.start_unix + t * spec.interval_secs)
        .collect();
    let series = RawSeries::new(timestamps, true, Some(spec.interval_secs), values, n)?;
    Ok(SyntheticSeries {
        series,
        adjacency,
        phases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(len: usize, n: usize) -> RawSeries {
        let ts = (0..len as i64).map(|t| t * 300).collect();
        let vals = (0..len * n).map(|i| ((i * 7919) % 101) as f64).collect();
        RawSeries::new(ts, true, None, vals, n).unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(100, 12, 12), 77);
        assert_eq!(window_count(24, 12, 12), 1);
        assert_eq!(window_count(23, 12, 12), 0);
    }

    #[test]
    fn split_of_77_windows() {
        let [a, b, c] = split_windows(77, [0.7, 0.2, 0.1]);
        assert_eq!((a.len(), b.len(), c.len()), (53, 16, 8));
        assert_eq!((a.end, b.end, c.end), (53, 69, 77));
    }

    #[test]
    fn single_window_boundary() {
        let ds = make_windows(series(24, 2), 12, 12, [1.0, 0.0, 0.0]);
        // valid fraction zero is allowed at this layer
        let ds = ds.unwrap();
        assert_eq!(ds.window_count(), 1);
    }

    #[test]
    fn too_short_series_rejected() {
        assert!(make_windows(series(23, 2), 12, 12, [0.7, 0.2, 0.1]).is_err());
    }

    #[test]
    fn gap_reports_row() {
        let ts = vec![0, 300, 900];
        let err = RawSeries::new(ts, true, None, vec![1.0, 2.0, 3.0], 1).unwrap_err();
        assert_eq!(
            err,
            Error::TimestampGap {
                row: 2,
                expected: 600,
                found: 900
            }
        );
        let err = RawSeries::new(vec![0, 300, 300], true, None, vec![1.0; 3], 1).unwrap_err();
        assert_eq!(err, Error::DuplicateTimestamp { row: 2 });
    }

    #[test]
    fn denormalize_hand_value() {
        let stats = NormStats {
            mean: vec![10.0],
            std: vec![2.0],
        };
        let p = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        assert_eq!(denormalize(&p, &stats).unwrap().data(), &[13.0]);
        let unit = NormStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        };
        let q = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        assert_eq!(denormalize(&q, &unit).unwrap(), q);
        assert!(denormalize(&q, &stats).is_err());
    }

    #[test]
    fn constant_series_rejected() {
        let ts = (0..30).collect();
        let s = RawSeries::new(ts, false, None, vec![5.0; 30], 1).unwrap();
        assert!(make_windows(s, 2, 2, [0.7, 0.2, 0.1]).is_err());
    }

    #[test]
    fn time_of_day_is_periodic() {
        let ds = make_windows(series(600, 1), 12, 12, [0.7, 0.2, 0.1]).unwrap();
        let tod = ds.series().time_of_day().unwrap();
        let period = (SECONDS_PER_DAY / 300) as usize;
        for i in 0..600 - period {
            assert_eq!(tod[i], tod[i + period]);
            assert!((0.0..1.0).contains(&tod[i]));
        }
        assert_eq!(ds.channels(), 2);
        let s = ds.sample(5);
        assert_eq!(s.input.shape(), &[1, 12, 2]);
        assert_eq!(s.target.shape(), &[1, 12]);
        assert_eq!(s.input.at(&[0, 0, 1]), tod[5]);
    }

    #[test]
    fn step_index_series_has_no_clock_channel() {
        let ts = (0..40).collect();
        let vals = (0..40).map(|i| (i % 7) as f64).collect();
        let s = RawSeries::new(ts, false, None, vals, 1).unwrap();
        let ds = make_windows(s, 4, 2, [0.7, 0.2, 0.1]).unwrap();
        assert_eq!(ds.channels(), 1);
    }

    #[test]
    fn noiseless_single_sinusoid_is_exact() {
        let spec = SyntheticSpec {
            n_vars: 1,
            length: 64,
            blocks: 1,
            periods: vec![8.0],
            amplitudes: vec![1.0],
            noise: 0.0,
            ..Default::default()
        };
        let out = gen_synthetic(&spec).unwrap();
        let phi = out.phases[0][0];
        for t in 0..64 {
            let want = libm::sin(2.0 * PI * t as f64 / 8.0 + phi);
            assert_eq!(out.series.value(t, 0), want);
        }
    }

    #[test]
    fn synthetic_is_reproducible() {
        let spec = SyntheticSpec::default();
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(a.series, b.series);
        let planted = &a.adjacency;
        for i in 0..spec.n_vars {
            assert_eq!(planted[i * spec.n_vars + i], 0.0);
        }
    }

    #[test]
    fn empty_spec_rejected() {
        let spec = SyntheticSpec {
            n_vars: 0,
            ..Default::default()
        };
        assert!(gen_synthetic(&spec).is_err());
    }
}
