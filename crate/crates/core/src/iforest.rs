//! Isolation Forest over dense feature matrices.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

/// Largest `n` for which harmonic numbers are summed exactly in
/// [`average_path_c`].
const EXACT_HARMONIC_MAX_N: usize = 10;

fn harmonic(k: usize, exact: bool) -> f64 {
    if exact {
        (1..=k).map(|i| 1.0 / i as f64).sum()
    } else {
        (k as f64).ln() + EULER_MASCHERONI
    }
}

/// Average path length of an unsuccessful binary-search-tree lookup among
/// `n` points, `c(n) = 2H(n−1) − 2(n−1)/n`, with `c(1) = 0`. Harmonic numbers
/// are exact up to `n = 10` and `ln k + γ` beyond.
pub fn average_path_c(n: usize) -> Result<f64> {
    match n {
        0 => Err(Error::Config("average path length is undefined for n = 0".into())),
        1 => Ok(0.0),
        _ => {
            let h = harmonic(n - 1, n <= EXACT_HARMONIC_MAX_N);
            Ok(2.0 * h - 2.0 * (n - 1) as f64 / n as f64)
        }
    }
}

fn c_of(n: usize) -> f64 {
    average_path_c(n.max(1)).expect("n ≥ 1")
}

/// `2^(−E[h] / c(ψ))`.
pub fn score_from_path_length(mean_path: f64, sample_size: usize) -> f64 {
    let c = c_of(sample_size);
    if c == 0.0 {
        return 0.5;
    }
    2f64.powf(-mean_path / c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Internal {
        feature: usize,
        split_value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

/// One isolation tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    pub nodes: Vec<Node>,
    pub height_limit: usize,
}

impl IsolationTree {
    fn build(points: &[Vec<f64>], sample: Vec<usize>, height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree {
            nodes: Vec::new(),
            height_limit,
        };
        tree.grow(points, sample, 0, rng);
        tree
    }

    fn grow(&mut self, points: &[Vec<f64>], idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: idx.len() });
        if depth >= self.height_limit || idx.len() <= 1 {
            return id;
        }
        let m = points[idx[0]].len();
        let ranges: Vec<(usize, f64, f64)> = (0..m)
            .filter_map(|f| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(points[i][f]), hi.max(points[i][f]))
                });
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return id;
        }
        let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let split_value = rng.random_range(lo..hi);
        let (left, right): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| points[i][feature] <= split_value);
        let l = self.grow(points, left, depth + 1, rng);
        let r = self.grow(points, right, depth + 1, rng);
        self.nodes[id] = Node::Internal {
            feature,
            split_value,
            left: l,
            right: r,
        };
        id
    }

    /// Depth of the leaf reached by `x` plus `c(leaf size)`.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match &self.nodes[node] {
                Node::Internal {
                    feature,
                    split_value,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *split_value { *left } else { *right };
                    depth += 1.0;
                }
                Node::Leaf { size } => return depth + c_of(*size),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Internal { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub trees: usize,
    pub subsample_size: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 100,
            subsample_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForestModel {
    pub trees: Vec<IsolationTree>,
    pub subsample_size: usize,
    /// Points actually drawn per tree, `min(ψ, n)`.
    pub sample_size: usize,
    pub dims: usize,
    pub seed: u64,
}

/// Builds `trees` isolation trees, each on a seeded subsample of `min(ψ, n)`
/// points with height limit `⌈log₂ min(ψ, n)⌉`.
pub fn fit(points: &[Vec<f64>], config: &ForestConfig) -> Result<IsolationForestModel> {
    use rayon::prelude::*;
    if config.trees == 0 {
        return Err(Error::Config("an isolation forest needs at least one tree".into()));
    }
    if config.subsample_size < 2 {
        return Err(Error::Config("subsample size must be at least 2".into()));
    }
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "isolation forest needs at least 2 points, got {}",
            points.len()
        )));
    }
    let dims = points[0].len();
    if dims == 0 {
        return Err(Error::Validation("feature vectors are empty".into()));
    }
    if let Some(p) = points.iter().find(|p| p.len() != dims) {
        return Err(Error::dimension("feature vector", dims, p.len()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("feature matrix holds a non-finite value".into()));
    }
    let sample_size = config.subsample_size.min(points.len());
    let height_limit = (sample_size as f64).log2().ceil() as usize;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds: Vec<u64> = (0..config.trees).map(|_| master.random()).collect();
    let trees = seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let sample = rand::seq::index::sample(&mut rng, points.len(), sample_size).into_vec();
            IsolationTree::build(points, sample, height_limit, &mut rng)
        })
        .collect();
    Ok(IsolationForestModel {
        trees,
        subsample_size: config.subsample_size,
        sample_size,
        dims,
        seed: config.seed,
    })
}

impl IsolationForestModel {
    fn mean_path(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// Anomaly score in (0, 1); higher is more anomalous.
    pub fn score(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.dims {
            return Err(Error::dimension("feature vector", self.dims, point.len()));
        }
        Ok(score_from_path_length(self.mean_path(point), self.sample_size))
    }

    pub fn score_all(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        points.iter().map(|p| self.score(p)).collect()
    }
}

pub fn score(model: &IsolationForestModel, point: &[f64]) -> Result<f64> {
    model.score(point)
}

/// Flags the `⌈contamination · n⌉` highest scores, lower index first on ties.
pub fn predict_from_scores(scores: &[f64], contamination: f64) -> Result<Vec<bool>> {
    if !(contamination > 0.0 && contamination < 1.0) {
        return Err(Error::Config(format!("contamination {contamination} is outside (0, 1)")));
    }
    let k = (contamination * scores.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut labels = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        labels[i] = true;
    }
    Ok(labels)
}

pub fn predict(model: &IsolationForestModel, points: &[Vec<f64>], contamination: f64) -> Result<Vec<bool>> {
    predict_from_scores(&model.score_all(points)?, contamination)
}

/// `index,score,label` rows.
pub fn scores_csv(scores: &[f64], labels: &[bool]) -> String {
    let mut out = String::from("index,score,label\n");
    for (i, (s, l)) in scores.iter().zip(labels).enumerate() {
        let _ = writeln!(out, "{i},{s},{}", u8::from(*l));
    }
    out
}
