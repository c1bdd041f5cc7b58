use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Label;

/// Confusion matrix with the anomalous class as positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Precision/recall/F1 of the anomalous class alone.
    AnomalyClass,
    /// Support-weighted mean of the per-class precision and recall.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
    pub averaging: Averaging,
    pub counts: ConfusionCounts,
    pub normal: ClassMetrics,
    pub anomalous: ClassMetrics,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn confusion(truth: &[Label], predicted: &[Label]) -> Result<ConfusionCounts> {
    if truth.len() != predicted.len() {
        return Err(Error::dimension("predicted labels", truth.len(), predicted.len()));
    }
    let mut c = ConfusionCounts::default();
    for (t, p) in truth.iter().zip(predicted) {
        match (t.is_anomalous(), p.is_anomalous()) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn class_metrics(tp: usize, fp: usize, fn_: usize) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    ClassMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        support: tp + fn_,
    }
}

pub fn metrics_from_counts(c: ConfusionCounts, averaging: Averaging) -> MetricsReport {
    let anomalous = class_metrics(c.tp, c.fp, c.fn_);
    let normal = class_metrics(c.tn, c.fn_, c.fp);
    let (precision, recall) = match averaging {
        Averaging::AnomalyClass => (anomalous.precision, anomalous.recall),
        Averaging::Weighted => {
            let n = c.total();
            let w = |m: fn(&ClassMetrics) -> f64| {
                if n == 0 {
                    0.0
                } else {
                    (m(&normal) * normal.support as f64 + m(&anomalous) * anomalous.support as f64) / n as f64
                }
            };
            (w(|m| m.precision), w(|m| m.recall))
        }
    };
    MetricsReport {
        precision,
        recall,
        tpr: anomalous.recall,
        fpr: ratio(c.fp, c.fp + c.tn),
        f1: f1_score(precision, recall),
        averaging,
        counts: c,
        normal,
        anomalous,
    }
}

pub fn compute_metrics(truth: &[Label], predicted: &[Label], averaging: Averaging) -> Result<MetricsReport> {
    Ok(metrics_from_counts(confusion(truth, predicted)?, averaging))
}

/// Probability that a random anomalous item outscores a random normal one,
/// ties counting one half.
pub fn ranking_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::dimension("truth labels", scores.len(), truth.len()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = truth.iter().filter(|t| **t).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InsufficientData("ranking AUC needs both classes".into()));
    }
    // Mann-Whitney U from midranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| truth[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Anomalous as A, Normal as N};

    #[test]
    fn perfect_prediction() {
        let truth = [N, A, N, A, A];
        for avg in [Averaging::AnomalyClass, Averaging::Weighted] {
            let m = compute_metrics(&truth, &truth, avg).unwrap();
            assert_eq!((m.precision, m.recall, m.f1, m.fpr), (1.0, 1.0, 1.0, 0.0));
        }
    }

    #[test]
    fn shaped_counts() {
        let c = ConfusionCounts { tp: 52, fn_: 1, fp: 1, tn: 91 };
        let m = metrics_from_counts(c, Averaging::AnomalyClass);
        assert!((m.recall - 52.0 / 53.0).abs() < 1e-15);
        assert!((m.tpr - 0.981).abs() < 5e-4);
        assert!((m.fpr - 1.0 / 92.0).abs() < 1e-15);
    }

    #[test]
    fn all_normal_predictions() {
        let truth = [N, A, N, A];
        let m = compute_metrics(&truth, &[N; 4], Averaging::AnomalyClass).unwrap();
        assert_eq!((m.tpr, m.fpr, m.precision, m.f1), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn few_anomalies_weighted_f1_stays_high() {
        // 4 anomalies, one found, no false alarms.
        let c = ConfusionCounts { tp: 1, fn_: 3, fp: 0, tn: 120 };
        let w = metrics_from_counts(c, Averaging::Weighted);
        assert_eq!(w.tpr, 0.25);
        assert!(w.f1 > 0.95, "{}", w.f1);
        assert!(metrics_from_counts(c, Averaging::AnomalyClass).f1 < 0.5);
    }

    #[test]
    fn length_mismatch() {
        assert!(compute_metrics(&[N], &[N, A], Averaging::Weighted).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(ranking_auc(&[0.1, 0.2, 0.9], &[false, false, true]).unwrap(), 1.0);
        assert_eq!(ranking_auc(&[0.9, 0.2, 0.1], &[false, false, true]).unwrap(), 0.0);
        assert_eq!(ranking_auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(ranking_auc(&[0.5, 0.5], &[true, true]).is_err());
    }

    fn labels(bits: &[bool]) -> Vec<Label> {
        bits.iter().map(|&b| if b { A } else { N }).collect()
    }

    proptest! {
        #[test]
        fn matches_naive_oracle(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..1000)) {
            let truth: Vec<bool> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let c = confusion(&labels(&truth), &labels(&pred)).unwrap();
            let count = |t: bool, p: bool| pairs.iter().filter(|x| x.0 == t && x.1 == p).count();
            prop_assert_eq!(c.tp, count(true, true));
            prop_assert_eq!(c.fp, count(false, true));
            prop_assert_eq!(c.tn, count(false, false));
            prop_assert_eq!(c.fn_, count(true, false));
            prop_assert_eq!(c.total(), pairs.len());

            let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
            let m = metrics_from_counts(c, Averaging::AnomalyClass);
            if c.tp + c.fp > 0 { prop_assert_eq!(m.precision, tp / (tp + fp)); }
            if c.tp + c.fn_ > 0 { prop_assert_eq!(m.tpr, tp / (tp + fn_)); }
            prop_assert_eq!(m.tpr, m.recall);
            for avg in [Averaging::AnomalyClass, Averaging::Weighted] {
                let m = metrics_from_counts(c, avg);
                prop_assert!((0.0..=1.0).contains(&m.f1));
                if m.precision + m.recall > 0.0 {
                    let hm = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                    prop_assert!((m.f1 - hm).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn auc_matches_pair_count(v in prop::collection::vec((0u8..20, any::<bool>()), 2..200)) {
            let scores: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let truth: Vec<bool> = v.iter().map(|p| p.1).collect();
            prop_assume!(truth.iter().any(|t| *t) && truth.iter().any(|t| !*t));
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for (i, &ti) in truth.iter().enumerate() {
                for (j, &tj) in truth.iter().enumerate() {
                    if ti && !tj {
                        pairs += 1.0;
                        wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            prop_assert!((ranking_auc(&scores, &truth).unwrap() - wins / pairs).abs() < 1e-12);
        }
    }
}
