//! Depth evaluation metrics: RMSE, relative errors, log RMSE, and the
//! threshold accuracies delta_1..3.
//!
//! Pixels count when the ground truth is valid and both depths are
//! positive. By default predictions are clipped to the evaluation range
//! and ground-truth pixels beyond the cap are excluded, following the
//! usual indoor protocol; pass `None` to evaluate uncapped.

use crate::dataset::DepthMap;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default evaluation range in meters.
pub const DEFAULT_EVAL_RANGE: (f64, f64) = (1e-3, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub log_rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
}

impl MetricsReport {
    /// Per-image average of several reports; `n_valid` accumulates.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::Metrics("no reports to average".into()));
        }
        let n = reports.len() as f64;
        Ok(MetricsReport {
            rmse: reports.iter().map(|r| r.rmse).sum::<f64>() / n,
            abs_rel: reports.iter().map(|r| r.abs_rel).sum::<f64>() / n,
            sq_rel: reports.iter().map(|r| r.sq_rel).sum::<f64>() / n,
            log_rmse: reports.iter().map(|r| r.log_rmse).sum::<f64>() / n,
            delta1: reports.iter().map(|r| r.delta1).sum::<f64>() / n,
            delta2: reports.iter().map(|r| r.delta2).sum::<f64>() / n,
            delta3: reports.iter().map(|r| r.delta3).sum::<f64>() / n,
            n_valid: reports.iter().map(|r| r.n_valid).sum(),
        })
    }
}

/// Metrics over the default capped range.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<MetricsReport> {
    compute_metrics_capped(pred, gt, Some(DEFAULT_EVAL_RANGE))
}

/// Metrics with an explicit evaluation range, or uncapped when `None`.
pub fn compute_metrics_capped(
    pred: &DepthMap,
    gt: &DepthMap,
    range: Option<(f64, f64)>,
) -> Result<MetricsReport> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut n = 0usize;
    let (mut se, mut ar, mut sr, mut sle) = (0.0f64, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    for i in 0..pred.depth().len() {
        let (mut p, g) = (pred.depth()[i], gt.depth()[i]);
        if !gt.valid()[i] || !pred.valid()[i] || p <= 0.0 || g <= 0.0 {
            continue;
        }
        if let Some((lo, hi)) = range {
            if g < lo || g > hi {
                continue;
            }
            p = p.clamp(lo, hi);
        }
        n += 1;
        let diff = g - p;
        se += diff * diff;
        ar += diff.abs() / g;
        sr += diff * diff / g;
        let ld = g.ln() - p.ln();
        sle += ld * ld;
        let ratio = (g / p).max(p / g);
        if ratio < 1.25 {
            d1 += 1;
        }
        if ratio < 1.25f64.powi(2) {
            d2 += 1;
        }
        if ratio < 1.25f64.powi(3) {
            d3 += 1;
        }
    }
    if n == 0 {
        return Err(Error::Metrics("no valid pixels to evaluate".into()));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        rmse: (se / nf).sqrt(),
        abs_rel: ar / nf,
        sq_rel: sr / nf,
        log_rmse: (sle / nf).sqrt(),
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        n_valid: n,
    })
}
