//! Scale-invariant log loss and depth evaluation metrics.

use std::fmt;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the squared-mean term, in [0, 1].
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: DEFAULT_LAMBDA }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("loss.lambda: {} is outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Predicted and ground-truth depth over the same raster.
#[derive(Clone, Debug)]
pub struct DepthPair {
    pub pred: Tensor,
    pub gt: Tensor,
    pub mask: Vec<bool>,
    /// `(min, max)` evaluation range in meters.
    pub cap: (f64, f64),
}

impl DepthPair {
    /// Full mask, unbounded cap.
    pub fn new(pred: Tensor, gt: Tensor) -> Result<Self> {
        let mask = vec![true; gt.len()];
        let p = DepthPair { pred, gt, mask, cap: (0.0, f64::INFINITY) };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        if self.pred.shape() != self.gt.shape() || self.mask.len() != self.gt.len() {
            return Err(Error::shape(
                "depth_pair",
                format!("mask has {} entries", self.mask.len()),
                &[self.pred.shape(), self.gt.shape()],
            ));
        }
        Ok(())
    }
}

fn masked_indices(gt: &Tensor, mask: &[bool]) -> Result<Vec<usize>> {
    if mask.len() != gt.len() {
        return Err(Error::shape("silog_loss", format!("mask has {} entries", mask.len()), &[gt.shape()]));
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(idx)
}

/// `sqrt(mean(g²) − λ·mean(g)²)` with `g = log gt − log pred` over masked
/// pixels. Evaluated as `sqrt(var(g) + (1 − λ)·mean(g)²)`, which is the same
/// quantity but never goes negative through cancellation.
pub fn silog_loss(g: &mut Graph, pred: Var, gt: &Tensor, mask: &[bool], cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if g.shape(pred) != gt.shape() {
        return Err(Error::shape("silog_loss", "pred and gt differ", &[g.shape(pred), gt.shape()]));
    }
    let idx = masked_indices(gt, mask)?;
    let pv = g.value(pred).data();
    for &i in &idx {
        if !(gt.data()[i] > 0.0) || !(pv[i] > 0.0) {
            return Err(Error::Domain(format!(
                "masked pixel {i} has gt {} and pred {}; both must be > 0",
                gt.data()[i],
                pv[i]
            )));
        }
    }
    let t = idx.len();
    let log_gt = Tensor::new(&[t], idx.iter().map(|&i| gt.data()[i].ln()).collect())?;
    let picked = g.gather(pred, idx, &[t])?;
    let log_pred = g.log(picked)?;
    let log_gt = g.constant(log_gt)?;
    let diff = g.sub(log_gt, log_pred)?;
    let mean = g.mean(diff)?;
    let mean_b = g.broadcast(mean, &[t])?;
    let dev = g.sub(diff, mean_b)?;
    let dev2 = g.mul(dev, dev)?;
    let var = g.mean(dev2)?;
    let mean2 = g.mul(mean, mean)?;
    let tail = g.scale(mean2, 1.0 - cfg.lambda)?;
    let inner = g.add(var, tail)?;
    g.sqrt(inner)
}

/// Loss value without keeping a graph around.
pub fn silog_value(pair: &DepthPair, cfg: &LossConfig) -> Result<f64> {
    pair.check_shapes()?;
    let mut g = Graph::new();
    let p = g.constant(pair.pred.clone())?;
    let l = silog_loss(&mut g, p, &pair.gt, &pair.mask, cfg)?;
    Ok(g.value(l).item())
}

/// CSV column order of [`MetricsReport`].
pub const METRIC_COLUMNS: [&str; 8] = ["delta1", "delta2", "delta3", "absrel", "sqrel", "rmse", "rmse_log", "log10"];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub absrel: f64,
    pub sqrel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
}

impl MetricsReport {
    pub fn values(&self) -> [f64; 8] {
        [self.delta1, self.delta2, self.delta3, self.absrel, self.sqrel, self.rmse, self.rmse_log, self.log10]
    }

    fn from_values(v: [f64; 8]) -> Self {
        MetricsReport {
            delta1: v[0],
            delta2: v[1],
            delta3: v[2],
            absrel: v[3],
            sqrel: v[4],
            rmse: v[5],
            rmse_log: v[6],
            log10: v[7],
        }
    }

    pub fn csv_header() -> String {
        METRIC_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values().iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
    }

    /// Unweighted mean over images.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 8];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }
}

/// Single-line `key=value` record.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = METRIC_COLUMNS.iter().zip(self.values()).map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Ground truth outside `(cap_min, cap_max]` is masked out; predictions are
/// clamped into `[cap_min, cap_max]`. Relative errors divide by ground truth.
pub fn compute_metrics(pair: &DepthPair) -> Result<MetricsReport> {
    pair.check_shapes()?;
    let (lo, hi) = pair.cap;
    if !(lo >= 0.0 && hi > lo) {
        return Err(Error::config(format!("cap ({lo}, {hi}) must satisfy 0 <= min < max")));
    }
    let (gt, pred) = (pair.gt.data(), pair.pred.data());
    let mut n = 0usize;
    let mut acc = [0.0; 8];
    for i in 0..gt.len() {
        let d = gt[i];
        if !pair.mask[i] || !(d > lo && d <= hi) {
            continue;
        }
        let p = pred[i].clamp(lo, hi);
        if !(p > 0.0) {
            return Err(Error::Domain(format!("pixel {i}: prediction {} is not positive after clamping", pred[i])));
        }
        n += 1;
        let ratio = (d / p).max(p / d);
        for (j, thr) in [1.25, 1.25f64.powi(2), 1.25f64.powi(3)].into_iter().enumerate() {
            if ratio < thr {
                acc[j] += 1.0;
            }
        }
        let e = d - p;
        acc[3] += e.abs() / d;
        acc[4] += e * e / d;
        acc[5] += e * e;
        let le = d.log10() - p.log10();
        acc[6] += le * le;
        acc[7] += le.abs();
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let m = acc.map(|a| a / n as f64);
    Ok(MetricsReport::from_values([m[0], m[1], m[2], m[3], m[4], m[5].sqrt(), m[6].sqrt(), m[7]]))
}
