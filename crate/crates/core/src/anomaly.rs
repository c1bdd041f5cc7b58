//! Mahalanobis anomaly scores over reconstruction-error vectors, threshold
//! calibration and degradation-onset detection.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::percentile_sorted;
use crate::signal::Label;

/// Gaussian fitted to normal-validation error vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorGaussian {
    pub mean: Vec<f64>,
    /// `d × d` row-major, ridge included.
    pub covariance: Vec<f64>,
    /// Inverse of `covariance`, row-major.
    pub precision: Vec<f64>,
    pub ridge: f64,
    /// Lower Cholesky factor of `covariance`, row-major.
    cholesky: Vec<f64>,
}

impl ErrorGaussian {
    /// Builds the distribution from a mean and a symmetric positive-definite
    /// covariance (no ridge added).
    pub fn from_parts(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        Self::with_ridge(mean, covariance, 0.0)
    }

    fn with_ridge(mean: Vec<f64>, mut covariance: Vec<f64>, ridge: f64) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Validation("error vectors must be non-empty".into()));
        }
        if covariance.len() != d * d {
            return Err(Error::dimension("covariance entries", d * d, covariance.len()));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (covariance[i * d + j], covariance[j * d + i]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::Validation("covariance is not symmetric".into()));
                }
                covariance[i * d + j] = b;
            }
            covariance[i * d + i] += ridge;
        }
        let sigma = DMatrix::from_row_slice(d, d, &covariance);
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        let inverse = chol.inverse();
        let l = chol.l();
        let row_major = |m: &DMatrix<f64>| -> Vec<f64> { (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect() };
        Ok(ErrorGaussian {
            precision: row_major(&inverse),
            cholesky: row_major(&l),
            covariance,
            mean,
            ridge,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Re-derives cached factors after deserialization and checks shapes.
    pub fn revalidated(self) -> Result<Self> {
        let mut cov = self.covariance;
        let d = self.mean.len();
        if cov.len() == d * d {
            for i in 0..d {
                cov[i * d + i] -= self.ridge;
            }
        }
        let g = Self::with_ridge(self.mean, cov, self.ridge)?;
        let precision_ok = self.precision.len() == d * d
            && self
                .precision
                .iter()
                .zip(&g.precision)
                .all(|(a, b)| (a - b).abs() <= 1e-8 * b.abs().max(1.0));
        if !precision_ok {
            return Err(Error::Validation("stored precision does not invert the covariance".into()));
        }
        Ok(g)
    }
}

/// MLE mean and (1/N) covariance of error vectors plus a ridge of
/// `1e-6 ×` the mean diagonal.
pub fn fit_error_gaussian(errors: &[Vec<f64>]) -> Result<ErrorGaussian> {
    let d = errors.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::InsufficientData("no error vectors to fit".into()));
    }
    if errors.len() < d + 1 {
        return Err(Error::InsufficientData(format!(
            "{} error vectors of dimension {d}; at least {} needed",
            errors.len(),
            d + 1
        )));
    }
    if let Some(e) = errors.iter().find(|e| e.len() != d) {
        return Err(Error::dimension("error vector", d, e.len()));
    }
    let n = errors.len() as f64;
    let mut mean = vec![0.0; d];
    for e in errors {
        for j in 0..d {
            mean[j] += e[j];
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut cov = vec![0.0; d * d];
    for e in errors {
        for i in 0..d {
            let di = e[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (e[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let mean_diag = (0..d).map(|i| cov[i * d + i]).sum::<f64>() / d as f64;
    let mean_sq = mean.iter().map(|m| m * m).sum::<f64>() / d as f64;
    let ridge = if mean_diag > 0.0 {
        1e-6 * mean_diag
    } else if mean_sq > 0.0 {
        1e-6 * mean_sq
    } else {
        1e-12
    };
    ErrorGaussian::with_ridge(mean, cov, ridge)
}

/// `(e − μ)ᵀ Σ⁻¹ (e − μ)`, evaluated as `‖L⁻¹(e − μ)‖²` with the Cholesky
/// factor so the result is never negative.
pub fn anomaly_score(e: &[f64], g: &ErrorGaussian) -> Result<f64> {
    let d = g.dim();
    if e.len() != d {
        return Err(Error::dimension("error vector", d, e.len()));
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut acc = e[i] - g.mean[i];
        for j in 0..i {
            acc -= g.cholesky[i * d + j] * y[j];
        }
        y[i] = acc / g.cholesky[i * d + i];
    }
    Ok(y.iter().map(|v| v * v).sum())
}

/// Same quadratic form through the cached precision matrix.
pub fn anomaly_score_precision(e: &[f64], g: &ErrorGaussian) -> Result<f64> {
    let d = g.dim();
    if e.len() != d {
        return Err(Error::dimension("error vector", d, e.len()));
    }
    let v = DVector::from_iterator(d, e.iter().zip(&g.mean).map(|(a, m)| a - m));
    let p = DMatrix::from_row_slice(d, d, &g.precision);
    Ok(v.dot(&(p * &v)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum ThresholdMethod {
    LabeledF1 { f1: f64 },
    Quantile { level: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    #[serde(flatten)]
    pub method: ThresholdMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn f1_at(scored: &[(f64, bool)], tau: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &(s, anomalous) in scored {
        match (s > tau, anomalous) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Learns τ. With both classes labeled in `val_mixed`, τ is the midpoint of
/// the adjacent pair of sorted scores that maximizes F1 there, preferring the
/// larger τ on ties. Otherwise τ is the `quantile` of the normal-validation
/// scores.
pub fn calibrate_threshold(
    val_normal: &[f64],
    val_mixed: &[(f64, Option<Label>)],
    quantile: f64,
) -> Result<Threshold> {
    if val_normal.is_empty() {
        return Err(Error::InsufficientData("no normal validation scores".into()));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Config(format!("quantile {quantile} is outside [0, 1]")));
    }
    let labeled: Vec<(f64, bool)> = val_mixed
        .iter()
        .filter_map(|&(s, l)| l.map(|l| (s, l.is_anomalous())))
        .collect();
    let positives = labeled.iter().filter(|p| p.1).count();
    let has_both = positives > 0 && positives < labeled.len();

    let mut note = None;
    if has_both {
        let mut sorted: Vec<f64> = labeled.iter().map(|p| p.0).collect();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        let mut best: Option<(f64, f64)> = None;
        for pair in sorted.windows(2) {
            let tau = 0.5 * (pair[0] + pair[1]);
            let f1 = f1_at(&labeled, tau);
            if best.is_none_or(|(bf, _)| f1 >= bf) {
                best = Some((f1, tau));
            }
        }
        if let Some((f1, tau)) = best {
            return Ok(Threshold {
                tau,
                method: ThresholdMethod::LabeledF1 { f1 },
                note: None,
            });
        }
        note = Some("mixed validation scores are all equal; using the normal-validation quantile".to_string());
    } else if !val_mixed.is_empty() {
        note = Some("mixed validation set lacks one of the classes; using the normal-validation quantile".to_string());
    }
    let mut sorted = val_normal.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Threshold {
        tau: percentile_sorted(&sorted, quantile).max(0.0),
        method: ThresholdMethod::Quantile { level: quantile },
        note,
    })
}

/// Score of one batch together with the error vector it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBatch {
    pub batch_index: usize,
    pub score: f64,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    pub batch_index: usize,
    pub score: f64,
    pub label: Label,
    pub errors: Vec<f64>,
}

/// Anomalous exactly when the score is strictly above τ.
pub fn classify(scores: &[ScoredBatch], threshold: &Threshold) -> Vec<AnomalyVerdict> {
    scores
        .iter()
        .map(|s| AnomalyVerdict {
            batch_index: s.batch_index,
            score: s.score,
            label: if s.score > threshold.tau {
                Label::Anomalous
            } else {
                Label::Normal
            },
            errors: s.errors.clone(),
        })
        .collect()
}

/// Plot-ready `batch_index,score,threshold,label` series.
pub fn verdicts_csv(verdicts: &[AnomalyVerdict], threshold: &Threshold) -> String {
    let mut out = String::from("batch_index,score,threshold,label\n");
    for v in verdicts {
        let _ = writeln!(out, "{},{},{},{}", v.batch_index, v.score, threshold.tau, v.label.code());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    /// Position in the chronological score list.
    pub onset_index: Option<usize>,
    pub confirmation_window: usize,
    pub min_fraction: f64,
    pub exceedance_fraction: Option<f64>,
}

/// Earliest `i` with `scores[i] > τ` and at least `min_fraction` of the
/// `window` scores starting at `i` above τ. Positions past the end of the
/// series count as not exceeding, so a lone spike near the end cannot
/// confirm itself.
pub fn detect_degradation_point(
    scores: &[f64],
    tau: f64,
    window: usize,
    min_fraction: f64,
) -> Result<DegradationReport> {
    if window == 0 {
        return Err(Error::Config("confirmation window must be at least 1".into()));
    }
    if !(min_fraction > 0.0 && min_fraction <= 1.0) {
        return Err(Error::Config(format!("min_fraction {min_fraction} is outside (0, 1]")));
    }
    let mut report = DegradationReport {
        onset_index: None,
        confirmation_window: window,
        min_fraction,
        exceedance_fraction: None,
    };
    for i in 0..scores.len() {
        if scores[i] <= tau {
            continue;
        }
        let end = (i + window).min(scores.len());
        let above = scores[i..end].iter().filter(|&&s| s > tau).count();
        let fraction = above as f64 / window as f64;
        if fraction >= min_fraction {
            report.onset_index = Some(i);
            report.exceedance_fraction = Some(fraction);
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_dimensional_fit() {
        let g = fit_error_gaussian(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert!((g.mean[0] - 2.0).abs() < 1e-15);
        let var = 2.0 / 3.0;
        assert!((g.covariance[0] - var * (1.0 + 1e-6)).abs() < 1e-15);
        assert_eq!(anomaly_score(&[2.0], &g).unwrap(), 0.0);
        let z = anomaly_score(&[2.0 + var.sqrt()], &g).unwrap();
        assert!((z - 1.0).abs() < 2e-6, "{z}");
    }

    #[test]
    fn identical_vectors_fit_with_ridge() {
        let g = fit_error_gaussian(&vec![vec![0.5, 0.25]; 4]).unwrap();
        assert!(g.ridge > 0.0);
        assert!(anomaly_score(&[0.5, 0.25], &g).unwrap() == 0.0);
        assert!(anomaly_score(&[0.6, 0.25], &g).unwrap() > 1e3);
    }

    #[test]
    fn too_few_vectors() {
        assert!(matches!(
            fit_error_gaussian(&[vec![1.0, 2.0], vec![2.0, 1.0]]),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn score_dimension_checked() {
        let g = fit_error_gaussian(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert!(anomaly_score(&[1.0, 2.0], &g).is_err());
    }

    #[test]
    fn precision_inverts_covariance() {
        let g = fit_error_gaussian(&[
            vec![1.0, 0.3, 2.0],
            vec![1.4, 0.1, 2.2],
            vec![0.7, 0.5, 1.1],
            vec![1.1, 0.2, 2.9],
            vec![0.9, 0.45, 1.8],
        ])
        .unwrap();
        let s = DMatrix::from_row_slice(3, 3, &g.covariance);
        let p = DMatrix::from_row_slice(3, 3, &g.precision);
        assert!(((s * p) - DMatrix::<f64>::identity(3, 3)).amax() < 1e-8);
        let e = [1.3, 0.0, 2.5];
        let a = anomaly_score(&e, &g).unwrap();
        let b = anomaly_score_precision(&e, &g).unwrap();
        assert!((a - b).abs() < 1e-9 * a.max(1.0));
        assert_eq!(g.clone().revalidated().unwrap(), g);
    }

    #[test]
    fn separable_validation_threshold() {
        let va = [
            (1.0, Some(Label::Normal)),
            (2.0, Some(Label::Normal)),
            (10.0, Some(Label::Anomalous)),
            (12.0, Some(Label::Anomalous)),
        ];
        let t = calibrate_threshold(&[0.5, 1.5], &va, 0.99).unwrap();
        assert!(t.tau > 2.0 && t.tau < 10.0);
        assert_eq!(t.method, ThresholdMethod::LabeledF1 { f1: 1.0 });
    }

    #[test]
    fn quantile_threshold_without_labels() {
        let vn: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = calibrate_threshold(&vn, &[], 0.99).unwrap();
        assert!((t.tau - 99.01).abs() < 1e-9);
        assert!(t.note.is_none());
    }

    #[test]
    fn single_class_falls_back_with_note() {
        let va = [(3.0, Some(Label::Normal)), (4.0, Some(Label::Normal))];
        let t = calibrate_threshold(&[1.0, 2.0], &va, 0.5).unwrap();
        assert_eq!(t.method, ThresholdMethod::Quantile { level: 0.5 });
        assert!((t.tau - 1.5).abs() < 1e-15);
        assert!(t.note.is_some());
    }

    #[test]
    fn tie_prefers_higher_threshold() {
        // Both gaps between the normal cluster and the anomaly give F1 = 1.
        let va = [
            (1.0, Some(Label::Normal)),
            (9.0, Some(Label::Anomalous)),
            (9.0, Some(Label::Anomalous)),
        ];
        let t = calibrate_threshold(&[1.0], &va, 0.9).unwrap();
        assert_eq!(t.tau, 5.0);
        let va = [
            (1.0, Some(Label::Normal)),
            (2.0, Some(Label::Anomalous)),
            (3.0, Some(Label::Normal)),
            (4.0, Some(Label::Normal)),
            (5.0, Some(Label::Anomalous)),
        ];
        // τ = 1.5 and τ = 4.5 both reach F1 = 2/3; the larger one wins.
        let t = calibrate_threshold(&[1.0], &va, 0.9).unwrap();
        assert_eq!(t.tau, 4.5);
    }

    fn thr(tau: f64) -> Threshold {
        Threshold {
            tau,
            method: ThresholdMethod::Quantile { level: 0.99 },
            note: None,
        }
    }

    #[test]
    fn strict_inequality_at_threshold() {
        let s = [ScoredBatch {
            batch_index: 4,
            score: 2.5,
            errors: vec![],
        }];
        assert_eq!(classify(&s, &thr(2.5))[0].label, Label::Normal);
        assert_eq!(classify(&s, &thr(2.4))[0].label, Label::Anomalous);
        let zeros: Vec<_> = (0..5)
            .map(|i| ScoredBatch {
                batch_index: i,
                score: 0.0,
                errors: vec![],
            })
            .collect();
        assert!(classify(&zeros, &thr(0.1)).iter().all(|v| v.label == Label::Normal));
    }

    #[test]
    fn degradation_examples() {
        let r = detect_degradation_point(&[0.0, 0.0, 0.0, 5.0, 6.0, 7.0, 8.0], 1.0, 3, 1.0).unwrap();
        assert_eq!(r.onset_index, Some(3));
        let mut spike = vec![0.0; 30];
        spike[12] = 9.0;
        assert_eq!(detect_degradation_point(&spike, 1.0, 5, 0.8).unwrap().onset_index, None);
        assert!(detect_degradation_point(&spike, 1.0, 0, 0.8).is_err());
        assert!(detect_degradation_point(&spike, 1.0, 5, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn raising_tau_never_adds_anomalies(scores in prop::collection::vec(0.0f64..10.0, 1..50), lo in 0.0f64..5.0, bump in 0.0f64..5.0) {
            let s: Vec<_> = scores.iter().enumerate().map(|(i, &score)| ScoredBatch { batch_index: i, score, errors: vec![] }).collect();
            let a = classify(&s, &thr(lo));
            let b = classify(&s, &thr(lo + bump));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(!(x.label == Label::Normal && y.label == Label::Anomalous));
            }
        }

        #[test]
        fn onset_monotone_in_fraction(scores in prop::collection::vec(0.0f64..3.0, 1..80), q1 in 0.05f64..1.0, dq in 0.0f64..1.0, w in 1usize..10) {
            let q2 = (q1 + dq).min(1.0);
            let a = detect_degradation_point(&scores, 1.0, w, q1).unwrap().onset_index;
            let b = detect_degradation_point(&scores, 1.0, w, q2).unwrap().onset_index;
            match (a, b) {
                (Some(x), Some(y)) => prop_assert!(y >= x),
                (None, Some(_)) => prop_assert!(false, "stricter fraction found an onset"),
                _ => {}
            }
        }

        #[test]
        fn separable_labels_give_perfect_f1(normals in prop::collection::vec(0.0f64..1.0, 1..20), anomalies in prop::collection::vec(2.0f64..5.0, 1..20)) {
            let va: Vec<(f64, Option<Label>)> = normals.iter().map(|&s| (s, Some(Label::Normal)))
                .chain(anomalies.iter().map(|&s| (s, Some(Label::Anomalous)))).collect();
            let t = calibrate_threshold(&[0.5], &va, 0.99).unwrap();
            let scored: Vec<ScoredBatch> = va.iter().enumerate().map(|(i, p)| ScoredBatch { batch_index: i, score: p.0, errors: vec![] }).collect();
            let verdicts = classify(&scored, &t);
            for (v, p) in verdicts.iter().zip(&va) {
                prop_assert_eq!(v.label, p.1.unwrap());
            }
        }
    }
}
