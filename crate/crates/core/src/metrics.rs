//! Forecast error metrics on denormalised values.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Horizon steps reported separately (15, 30 and 60 minutes at 5-minute
/// sampling).
pub const REPORT_STEPS: [usize; 3] = [3, 6, 12];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mae: f64,
    /// Percent; `None` when every true value is zero.
    pub mape: Option<f64>,
    pub rmse: f64,
    /// Points left out of MAPE because the true value is zero.
    pub mape_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based horizon step.
    pub step: usize,
    #[serde(flatten)]
    pub errors: ErrorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: ErrorSummary,
    pub per_step: Vec<StepMetrics>,
    /// The subset of `per_step` at [`REPORT_STEPS`] within the horizon.
    pub horizons: Vec<StepMetrics>,
    pub samples: usize,
}

/// MAE, MAPE and RMSE over paired values.
pub fn summarize(pred: &[f64], truth: &[f64]) -> Result<ErrorSummary> {
    if pred.len() != truth.len() {
        return Err(Error::shape("metrics", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::data("metrics need at least one value"));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct, mut pct_n) = (0.0, 0.0, 0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let e = p - t;
        abs += libm::fabs(e);
        sq += e * e;
        if *t != 0.0 {
            pct += libm::fabs(e / t);
            pct_n += 1;
        }
    }
    Ok(ErrorSummary {
        mae: abs / n,
        mape: (pct_n > 0).then(|| 100.0 * pct / pct_n as f64),
        rmse: libm::sqrt(sq / n),
        mape_excluded: pred.len() - pct_n,
    })
}

/// Metrics over row-major `[samples, N, horizon]` predictions.
pub fn evaluate_forecasts(pred: &[f64], truth: &[f64], n_vars: usize, horizon: usize) -> Result<Metrics> {
    let block = n_vars * horizon;
    if block == 0 || !pred.len().is_multiple_of(block) {
        return Err(Error::data(format!(
            "{} values do not tile [samples, {n_vars}, {horizon}]",
            pred.len()
        )));
    }
    let overall = summarize(pred, truth)?;
    let mut per_step = Vec::with_capacity(horizon);
    for s in 0..horizon {
        let pick = |v: &[f64]| -> Vec<f64> { v.iter().skip(s).step_by(horizon).copied().collect() };
        per_step.push(StepMetrics {
            step: s + 1,
            errors: summarize(&pick(pred), &pick(truth))?,
        });
    }
    let horizons = REPORT_STEPS
        .iter()
        .filter(|&&s| s <= horizon)
        .map(|&s| per_step[s - 1].clone())
        .collect();
    Ok(Metrics {
        overall,
        per_step,
        horizons,
        samples: pred.len() / block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_fixture() {
        let m = summarize(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert_eq!(m.mae, 1.5);
        assert_eq!(m.rmse, libm::sqrt(2.5));
        assert_eq!(m.mape, Some(50.0));
    }

    #[test]
    fn perfect_forecast() {
        let m = summarize(&[3.0, -1.0], &[3.0, -1.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (0.0, 0.0, Some(0.0)));
    }

    #[test]
    fn zero_truth_excluded_from_mape() {
        let m = summarize(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!(m.mape_excluded, 1);
        assert_eq!(m.mape, Some(50.0));
        let none = summarize(&[1.0], &[0.0]).unwrap();
        assert_eq!(none.mape, None);
    }

    #[test]
    fn per_step_layout() {
        // two samples, one variable, horizon 3; error only at step 2
        let truth = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let pred = [0.0, 2.0, 0.0, 1.0, 3.0, 1.0];
        let m = evaluate_forecasts(&pred, &truth, 1, 3).unwrap();
        assert_eq!(m.samples, 2);
        assert_eq!(m.per_step[1].errors.mae, 2.0);
        assert_eq!(m.per_step[0].errors.mae, 0.0);
        assert_eq!(m.horizons.len(), 1);
        assert_eq!(m.horizons[0].step, 3);
        assert!(evaluate_forecasts(&pred[..5], &truth[..5], 1, 3).is_err());
    }
}
