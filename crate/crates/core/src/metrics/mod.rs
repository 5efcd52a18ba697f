//! Forecast quality: RMSE, accuracy rules, Spearman rank correlation, and
//! two reference forecasters.

mod baseline;

pub use baseline::{persistence_forecast, Ar1Model};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::hard_decision;
use crate::tensor::Tensor;
use crate::training::NormStats;

/// Normalized absolute error at or below which a cell counts as accurate.
pub const NORM_ERROR_THRESHOLD: f64 = 0.5;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `√(mean((pred − target)²))` over all cells.
pub fn rmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("rmse", pred, target)?;
    if pred.numel() == 0 {
        return Err(Error::contract("rmse of an empty tensor"));
    }
    let sq: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / pred.numel() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    /// Fraction of cells whose normalized absolute error is at most 0.5.
    pub norm_error_accuracy: f64,
    /// Fraction of cells whose occupancy decision matches the target's.
    pub availability_accuracy: f64,
}

/// Both accuracy definitions for dBm inputs of equal shape.
pub fn accuracy_metrics(pred: &Tensor, target: &Tensor, norm: &NormStats, threshold_dbm: f64) -> Result<AccuracyMetrics> {
    same_shape("accuracy_metrics", pred, target)?;
    let n = pred.numel();
    if n == 0 {
        return Err(Error::contract("accuracy of an empty tensor"));
    }
    let close = pred
        .data()
        .iter()
        .zip(target.data())
        .filter(|(p, t)| (norm.normalize_value(**p) - norm.normalize_value(**t)).abs() <= NORM_ERROR_THRESHOLD)
        .count();
    let (hp, ht) = (hard_decision(pred, threshold_dbm), hard_decision(target, threshold_dbm));
    let agree = hp.data().iter().zip(ht.data()).filter(|(a, b)| a == b).count();
    Ok(AccuracyMetrics {
        norm_error_accuracy: close as f64 / n as f64,
        availability_accuracy: agree as f64 / n as f64,
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// `κ = 1 − 6·Σd² / (M(M² − 1))` with `d` the rank differences.
pub fn spearman_kappa(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("spearman_kappa", &[pred.len()], &[target.len()]));
    }
    let m = pred.len();
    if m < 2 {
        return Err(Error::contract(format!("spearman_kappa needs at least 2 points, got {m}")));
    }
    let (rp, rt) = (average_ranks(pred), average_ranks(target));
    let d2: f64 = rp.iter().zip(&rt).map(|(a, b)| (a - b) * (a - b)).sum();
    let m = m as f64;
    Ok((1.0 - 6.0 * d2 / (m * (m * m - 1.0))).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_db: f64,
    pub norm_error_accuracy: f64,
    pub availability_accuracy: f64,
    /// Mean κ per channel over all forecast windows.
    pub spearman_kappa: Vec<f64>,
    pub spearman_kappa_mean: f64,
    pub horizon: usize,
    pub windows: usize,
    /// Mean of `θ = p̂ − p` in dB.
    pub theta_mean: f64,
    /// Largest `|θ|` in dB.
    pub theta_max_abs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn as_windows(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [m, f] => Ok((1, m, f)),
        [n, m, f] => Ok((n, m, f)),
        _ => Err(Error::dim("metrics", t.shape(), &[3])),
    }
}

impl MetricsReport {
    /// Evaluates dBm forecasts `[N, M, F]` (or a single `[M, F]`) against targets.
    pub fn compute(pred: &Tensor, target: &Tensor, norm: &NormStats, threshold_dbm: f64) -> Result<Self> {
        same_shape("metrics", pred, target)?;
        let (n, m, f) = as_windows(pred)?;
        let acc = accuracy_metrics(pred, target, norm, threshold_dbm)?;
        let mut kappa = vec![0.0; f];
        let (mut ps, mut ts) = (vec![0.0; m], vec![0.0; m]);
        for w in 0..n {
            for (c, k) in kappa.iter_mut().enumerate() {
                for s in 0..m {
                    ps[s] = pred.data()[(w * m + s) * f + c];
                    ts[s] = target.data()[(w * m + s) * f + c];
                }
                *k += spearman_kappa(&ps, &ts)?;
            }
        }
        kappa.iter_mut().for_each(|k| *k /= n as f64);
        let theta: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
        Ok(MetricsReport {
            rmse_db: rmse(pred, target)?,
            norm_error_accuracy: acc.norm_error_accuracy,
            availability_accuracy: acc.availability_accuracy,
            spearman_kappa_mean: kappa.iter().sum::<f64>() / f as f64,
            spearman_kappa: kappa,
            horizon: m,
            windows: n,
            theta_mean: theta.iter().sum::<f64>() / theta.len() as f64,
            theta_max_abs: theta.iter().fold(0.0, |a, t| a.max(t.abs())),
            config_hash: None,
        })
    }
}

/// Mean absolute normalized error per (horizon slot, channel) as CSV rows
/// `slot,channel,error`.
pub fn write_error_csv<W: Write>(
    mut out: W,
    pred: &Tensor,
    target: &Tensor,
    norm: &NormStats,
    comment: Option<&str>,
) -> Result<()> {
    same_shape("error csv", pred, target)?;
    let (n, m, f) = as_windows(pred)?;
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "slot,channel,error")?;
    for s in 0..m {
        for c in 0..f {
            let e: f64 = (0..n)
                .map(|w| {
                    let i = (w * m + s) * f + c;
                    (pred.data()[i] - target.data()[i]).abs() / norm.std
                })
                .sum::<f64>()
                / n as f64;
            writeln!(out, "{s},{c},{e:.6}")?;
        }
    }
    Ok(())
}
