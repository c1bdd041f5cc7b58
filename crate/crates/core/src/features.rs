//! Handcrafted time-domain features of a vibration channel.
//!
//! Per channel the order is fixed: mean, rms, p25, p50, p75, max_abs, std,
//! peak_to_peak, skewness, kurtosis, entropy, then `ar1..arp`. Moments use the
//! population (1/N) convention throughout.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::signal::VibrationBatch;

/// Names of the fixed per-channel scalar features, in output order.
pub const SCALAR_FEATURES: [&str; 11] = [
    "mean",
    "rms",
    "p25",
    "p50",
    "p75",
    "max_abs",
    "std",
    "peak_to_peak",
    "skewness",
    "kurtosis",
    "entropy",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasicStats {
    pub mean: f64,
    pub rms: f64,
    pub std: f64,
    pub max_abs: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

fn require_len(x: &[f64], min: usize) -> Result<()> {
    if x.len() < min {
        return Err(Error::InsufficientData(format!(
            "{} samples given, at least {min} required",
            x.len()
        )));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn population_std(x: &[f64], mu: f64) -> f64 {
    (x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Percentile of already sorted data, interpolating linearly between the two
/// closest ranks (`q` in [0, 1]).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn basic_stats(x: &[f64]) -> Result<BasicStats> {
    require_len(x, 2)?;
    let mu = mean(x);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let max_abs = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(BasicStats {
        mean: mu,
        rms,
        std: population_std(x, mu),
        max_abs,
        p25: percentile_sorted(&sorted, 0.25),
        p50: percentile_sorted(&sorted, 0.50),
        p75: percentile_sorted(&sorted, 0.75),
    })
}

/// `|max(x)| + |min(x)|`. This is not `max − min` when both extremes share
/// a sign.
pub fn peak_to_peak(x: &[f64]) -> Result<f64> {
    require_len(x, 1)?;
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(hi.abs() + lo.abs())
}

fn standardized_moment(x: &[f64], order: i32) -> Result<f64> {
    require_len(x, 2)?;
    let mu = mean(x);
    let sigma = population_std(x, mu);
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sigma <= 1e-12 * scale || sigma == 0.0 {
        return Err(Error::Degenerate("standard deviation is zero".into()));
    }
    let n = x.len() as f64;
    Ok(x.iter().map(|v| (v - mu).powi(order)).sum::<f64>() / (n * sigma.powi(order)))
}

/// Biased third standardized moment.
pub fn skewness(x: &[f64]) -> Result<f64> {
    standardized_moment(x, 3)
}

/// Non-excess fourth standardized moment (Gaussian ≈ 3).
pub fn kurtosis(x: &[f64]) -> Result<f64> {
    standardized_moment(x, 4)
}

/// Shannon entropy `−Σ pᵢ ln pᵢ` of an equal-width histogram over the
/// signal's own range. A constant signal has entropy 0.
pub fn entropy(x: &[f64], bins: usize) -> Result<f64> {
    require_len(x, 2)?;
    if bins < 2 {
        return Err(Error::Config(format!("entropy needs at least 2 bins, got {bins}")));
    }
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Ok(0.0);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in x {
        let k = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = x.len() as f64;
    Ok(-counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>())
}

/// Biased autocorrelation of the mean-removed signal for lags `0..=max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let mu = mean(x);
    let centered: Vec<f64> = x.iter().map(|v| v - mu).collect();
    let n = x.len() as f64;
    (0..=max_lag)
        .map(|lag| {
            centered[lag..]
                .iter()
                .zip(&centered)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Solves the Yule–Walker equations by Levinson–Durbin recursion.
///
/// Returns `a₁..a_p` such that `r[m] = Σₖ aₖ r[|m−k|]` for `m = 1..p`.
pub fn levinson_durbin(r: &[f64], order: usize) -> Result<Vec<f64>> {
    if r.len() <= order {
        return Err(Error::InsufficientData(format!(
            "{} autocorrelation lags for order {order}",
            r.len()
        )));
    }
    let mut err = r[0];
    if !(err > 0.0) {
        return Err(Error::Numerical("zero-lag autocorrelation is not positive".into()));
    }
    let mut a = vec![0.0; order];
    let mut prev = vec![0.0; order];
    for m in 0..order {
        let acc = r[m + 1] - (0..m).map(|j| a[j] * r[m - j]).sum::<f64>();
        let k = acc / err;
        if !k.is_finite() || k.abs() >= 1.0 {
            return Err(Error::Numerical(format!(
                "reflection coefficient {k} at order {} is not inside the unit interval",
                m + 1
            )));
        }
        prev[..m].copy_from_slice(&a[..m]);
        for j in 0..m {
            a[j] = prev[j] - k * prev[m - 1 - j];
        }
        a[m] = k;
        err *= 1.0 - k * k;
    }
    Ok(a)
}

/// Coefficients of the AR model `x[n] = Σₖ aₖ x[n−k] + e[n]`.
pub fn ar_coefficients(x: &[f64], order: usize) -> Result<Vec<f64>> {
    if order == 0 {
        return Err(Error::Config("AR order must be positive".into()));
    }
    if x.len() <= order {
        return Err(Error::InsufficientData(format!(
            "AR({order}) needs more than {order} samples, got {}",
            x.len()
        )));
    }
    let r = autocorrelation(x, order);
    if r[0] <= 1e-24 * x.iter().fold(0.0f64, |m, v| m.max(v * v)) || r[0] == 0.0 {
        return Err(Error::Degenerate("constant signal has no AR structure".into()));
    }
    levinson_durbin(&r, order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub bins: usize,
    pub ar_order: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { bins: 16, ar_order: 4 }
    }
}

impl FeatureConfig {
    pub fn per_channel(&self) -> usize {
        SCALAR_FEATURES.len() + self.ar_order
    }

    /// Column names `ch{j}_{feature}` and `ch{j}_ar{k}` for `channels` channels.
    pub fn names(&self, channels: usize) -> Vec<String> {
        let mut names = Vec::with_capacity(channels * self.per_channel());
        for j in 0..channels {
            names.extend(SCALAR_FEATURES.iter().map(|f| format!("ch{j}_{f}")));
            names.extend((1..=self.ar_order).map(|k| format!("ch{j}_ar{k}")));
        }
        names
    }
}

/// Concatenated per-channel features of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub channels: usize,
    pub ar_order: usize,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn channel(&self, j: usize) -> &[f64] {
        let w = SCALAR_FEATURES.len() + self.ar_order;
        &self.values[j * w..(j + 1) * w]
    }
}

fn channel_features(x: &[f64], config: &FeatureConfig) -> Result<Vec<f64>> {
    let s = basic_stats(x)?;
    let mut out = vec![
        s.mean,
        s.rms,
        s.p25,
        s.p50,
        s.p75,
        s.max_abs,
        s.std,
        peak_to_peak(x)?,
        skewness(x)?,
        kurtosis(x)?,
        entropy(x, config.bins)?,
    ];
    out.extend(ar_coefficients(x, config.ar_order)?);
    Ok(out)
}

pub fn extract_all(batch: &VibrationBatch, config: &FeatureConfig) -> Result<FeatureVector> {
    let mut values = Vec::with_capacity(batch.channels() * config.per_channel());
    for j in 0..batch.channels() {
        let feats = channel_features(&batch.channel(j), config).map_err(|e| Error::Channel {
            channel: j,
            source: Box::new(e),
        })?;
        values.extend(feats);
    }
    Ok(FeatureVector {
        channels: batch.channels(),
        ar_order: config.ar_order,
        values,
    })
}

/// Renders one row per batch, prefixed with `machine_id,batch_index`.
pub fn features_csv(
    batches: &[VibrationBatch],
    columns: &[String],
    rows: &[Vec<f64>],
) -> String {
    let mut out = String::from("machine_id,batch_index");
    for c in columns {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (b, row) in batches.iter().zip(rows) {
        let _ = write!(out, "{},{}", b.machine_id, b.batch_index);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_features_csv(
    path: &Path,
    batches: &[VibrationBatch],
    config: &FeatureConfig,
    features: &[FeatureVector],
) -> Result<()> {
    let d = batches.first().map_or(0, VibrationBatch::channels);
    let rows: Vec<Vec<f64>> = features.iter().map(|f| f.values.clone()).collect();
    write_atomic(path, features_csv(batches, &config.names(d), &rows).as_bytes())
}
