//! Minibatch training with Adam, global-norm clipping and seeded random
//! hyperparameter search.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{Architecture, AutoencoderParams, Gradients, Weights};
use crate::signal::VibrationBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden_sizes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            minibatch_size: 32,
            epochs: 100,
            clip_norm: 5.0,
            dropout_rate: 0.1,
            weight_decay: 0.0,
            seed: 0,
            hidden_sizes: vec![64, 16],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize) -> Result<Architecture> {
        Architecture::new(input_dim, self.hidden_sizes.clone())
    }
}

/// Rescales `grads` in place so the global L2 norm does not exceed
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, clip_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Weights,
    pub second_moment: Weights,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(like: &Weights) -> Self {
        AdamState {
            first_moment: like.zeros_like(),
            second_moment: like.zeros_like(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam update preceded by decoupled weight decay
/// `p ← p − lr·λ·p`.
pub fn adam_step(params: &mut Weights, grads: &Gradients, state: &mut AdamState, lr: f64, weight_decay: f64) {
    assert!(params.congruent(grads), "gradient layout does not match parameters");
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let moments = state
        .first_moment
        .buffers_mut()
        .into_iter()
        .zip(state.second_moment.buffers_mut());
    for ((p, g), (m, v)) in params.buffers_mut().into_iter().zip(grads.buffers()).zip(moments) {
        for k in 0..p.len() {
            if weight_decay != 0.0 {
                p[k] -= lr * weight_decay * p[k];
            }
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of a training run: the best-validation parameter snapshot and the
/// per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: AutoencoderParams,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub initial_val_loss: f64,
}

impl TrainOutcome {
    /// Training log as `epoch,train_loss,val_loss` CSV.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.history {
            out += &format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss);
        }
        out
    }
}

/// Mean scalar reconstruction MSE with dropout disabled.
pub fn mean_loss(params: &AutoencoderParams, batches: &[VibrationBatch]) -> Result<f64> {
    use rayon::prelude::*;
    if batches.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<Result<f64>> = batches
        .par_iter()
        .map(|b| params.reconstruct(b).map(|(_, e)| e.scalar))
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batches.len() as f64)
}

/// Trains `model` on normal sequences, selecting the epoch with the lowest
/// loss on `val_normal` (the training loss when no validation data is
/// given).
pub fn train(
    model: AutoencoderParams,
    train_batches: &[VibrationBatch],
    val_normal: &[VibrationBatch],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some(b) = train_batches.iter().find(|b| b.is_anomalous()) {
        return Err(Error::Validation(format!(
            "training data must be normal, batch {} of {} is labeled anomalous",
            b.batch_index, b.machine_id
        )));
    }
    let mut params = model;
    params.dropout_rate = config.dropout_rate;
    params.validate()?;
    let initial_val_loss = mean_loss(&params, val_normal)?;
    let mut outcome = TrainOutcome {
        params: params.clone(),
        history: Vec::new(),
        best_epoch: None,
        initial_val_loss,
    };
    if config.epochs == 0 {
        return Ok(outcome);
    }
    if train_batches.is_empty() {
        return Err(Error::InsufficientData("no training sequences".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&params.weights);
    let mut order: Vec<usize> = (0..train_batches.len()).collect();
    let mut best = f64::INFINITY;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (mb, chunk) in order.chunks(config.minibatch_size).enumerate() {
            let seqs: Vec<&VibrationBatch> = chunk.iter().map(|&i| &train_batches[i]).collect();
            let seeds: Vec<u64> = (0..seqs.len()).map(|_| rng.next_u64()).collect();
            let (loss, mut grads) = params.batch_gradient(&seqs, Some(&seeds))?;
            if !loss.is_finite() || grads.norm().is_nan() {
                return Err(Error::Divergence { epoch, minibatch: mb });
            }
            clip_gradients(&mut grads, config.clip_norm);
            adam_step(&mut params.weights, &grads, &mut adam, config.learning_rate, config.weight_decay);
            epoch_loss += loss * seqs.len() as f64;
        }
        let train_loss = epoch_loss / train_batches.len() as f64;
        let val_loss = if val_normal.is_empty() {
            train_loss
        } else {
            mean_loss(&params, val_normal)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                minibatch: usize::MAX,
            });
        }
        outcome.history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best {
            best = val_loss;
            outcome.best_epoch = Some(epoch);
            outcome.params = params.clone();
        }
    }
    Ok(outcome)
}

/// Initializes a network from `config` and trains it.
pub fn train_from_config(
    train_batches: &[VibrationBatch],
    val_normal: &[VibrationBatch],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let d = train_batches
        .first()
        .ok_or_else(|| Error::InsufficientData("no training sequences".into()))?
        .channels();
    let model = AutoencoderParams::init(config.architecture(d)?, config.dropout_rate, config.seed)?;
    train(model, train_batches, val_normal, config)
}

/// Closed interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub min: T,
    pub max: T,
}

impl<T: PartialOrd + Copy> Interval<T> {
    pub fn point(v: T) -> Self {
        Interval { min: v, max: v }
    }

    fn check(&self, name: &str) -> Result<()>
    where
        T: std::fmt::Debug,
    {
        if self.min > self.max || self.min != self.min {
            return Err(Error::Config(format!(
                "search range for {name} is empty: [{:?}, {:?}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Ranges searched by [`hyper_search`]; unlisted fields come from `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub learning_rate: Interval<f64>,
    pub minibatch_size: Interval<usize>,
    pub weight_decay: Interval<f64>,
    pub dropout_rate: Interval<f64>,
    /// Epoch budget of each trial.
    pub trial_epochs: usize,
    pub base: TrainConfig,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rate: Interval { min: 1e-4, max: 1e-2 },
            minibatch_size: Interval { min: 8, max: 64 },
            weight_decay: Interval { min: 0.0, max: 1e-3 },
            dropout_rate: Interval { min: 0.0, max: 0.3 },
            trial_epochs: 20,
            base: TrainConfig::default(),
        }
    }
}

impl SearchSpace {
    fn check(&self) -> Result<()> {
        self.learning_rate.check("learning_rate")?;
        self.minibatch_size.check("minibatch_size")?;
        self.weight_decay.check("weight_decay")?;
        self.dropout_rate.check("dropout_rate")?;
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> TrainConfig {
        let real = |r: &mut ChaCha8Rng, i: Interval<f64>| {
            if i.min == i.max {
                i.min
            } else {
                r.random_range(i.min..=i.max)
            }
        };
        TrainConfig {
            learning_rate: real(rng, self.learning_rate),
            minibatch_size: rng.random_range(self.minibatch_size.min..=self.minibatch_size.max),
            weight_decay: real(rng, self.weight_decay),
            dropout_rate: real(rng, self.dropout_rate),
            epochs: self.trial_epochs,
            ..self.base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: TrainConfig,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub trials: Vec<Trial>,
    pub best: TrainConfig,
}

impl SearchReport {
    pub fn trials_csv(&self) -> String {
        let mut out = String::from("trial,learning_rate,minibatch_size,weight_decay,dropout_rate,epochs,val_loss\n");
        for (k, t) in self.trials.iter().enumerate() {
            let c = &t.config;
            out += &format!(
                "{k},{},{},{},{},{},{}\n",
                c.learning_rate, c.minibatch_size, c.weight_decay, c.dropout_rate, c.epochs, t.val_loss
            );
        }
        out
    }
}

/// Seeded uniform random search. Each of `budget` sampled configurations is
/// trained for `space.trial_epochs`; the one with the lowest best-epoch
/// validation loss wins (earliest trial on ties). The returned winner keeps
/// the base epoch count.
pub fn hyper_search(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    train_batches: &[VibrationBatch],
    val_normal: &[VibrationBatch],
) -> Result<SearchReport> {
    use rayon::prelude::*;
    if budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    space.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs: Vec<TrainConfig> = (0..budget).map(|_| space.sample(&mut rng)).collect();
    let results: Vec<Result<f64>> = configs
        .par_iter()
        .map(|c| {
            let out = train_from_config(train_batches, val_normal, c)?;
            Ok(out
                .history
                .iter()
                .map(|e| e.val_loss)
                .fold(out.initial_val_loss, f64::min))
        })
        .collect();
    let mut trials = Vec::with_capacity(budget);
    for (config, r) in configs.into_iter().zip(results) {
        let val_loss = match r {
            Ok(v) => v,
            Err(Error::Divergence { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        trials.push(Trial { config, val_loss });
    }
    let winner = trials
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.val_loss.total_cmp(&b.1.val_loss).then(a.0.cmp(&b.0)))
        .map(|(_, t)| t.config.clone())
        .expect("budget ≥ 1");
    Ok(SearchReport {
        best: TrainConfig {
            epochs: space.base.epochs,
            ..winner
        },
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Label;

    fn tiny_net() -> AutoencoderParams {
        AutoencoderParams::init(Architecture::new(2, vec![4, 2]).unwrap(), 0.0, 7).unwrap()
    }

    fn sine(index: usize, t: usize) -> VibrationBatch {
        let data = (0..t)
            .flat_map(|k| {
                let x = k as f64 * 0.5 + index as f64 * 0.3;
                [x.sin(), 0.5 * (x * 0.5).cos()]
            })
            .collect();
        VibrationBatch::new("m", index, 2, data, Some(Label::Normal)).unwrap()
    }

    #[test]
    fn clipping_scales_to_limit() {
        let mut g = tiny_net().weights.zeros_like();
        g.projection.bias[0] = 6.0;
        g.projection.bias[1] = 8.0;
        let before = clip_gradients(&mut g, 5.0);
        assert_eq!(before, 10.0);
        assert!((g.norm() - 5.0).abs() < 1e-12);

        let mut small = tiny_net().weights.zeros_like();
        small.encoder[0].bias[0] = 3.0;
        let copy = small.clone();
        clip_gradients(&mut small, 5.0);
        assert_eq!(small, copy);

        let mut zero = tiny_net().weights.zeros_like();
        clip_gradients(&mut zero, 5.0);
        assert_eq!(zero.norm(), 0.0);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let net = tiny_net();
        let mut w = net.weights.clone();
        let mut g = w.zeros_like();
        for b in g.buffers_mut() {
            b.fill(1.0);
        }
        let mut state = AdamState::new(&w);
        adam_step(&mut w, &g, &mut state, 1e-3, 0.0);
        let expected = -1e-3 / (1.0 + 1e-8);
        for (after, before) in w.flatten().iter().zip(net.weights.flatten()) {
            assert!((after - before - expected).abs() < 1e-15);
        }
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let net = tiny_net();
        let mut w = net.weights.clone();
        let g = w.zeros_like();
        let mut state = AdamState::new(&w);
        for _ in 0..5 {
            adam_step(&mut w, &g, &mut state, 1e-2, 0.0);
        }
        assert_eq!(w, net.weights);
        assert!(state.second_moment.flatten().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let net = tiny_net();
        let mut w = net.weights.clone();
        let g = w.zeros_like();
        let mut state = AdamState::new(&w);
        adam_step(&mut w, &g, &mut state, 0.1, 0.5);
        for (after, before) in w.flatten().iter().zip(net.weights.flatten()) {
            assert!((after - before * 0.95).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_epochs_returns_initial() {
        let data: Vec<_> = (0..4).map(|i| sine(i, 6)).collect();
        let cfg = TrainConfig {
            epochs: 0,
            hidden_sizes: vec![4, 2],
            ..TrainConfig::default()
        };
        let net = tiny_net();
        let out = train(net.clone(), &data, &data, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.params.weights, net.weights);
    }

    #[test]
    fn anomalous_training_data_rejected() {
        let mut data: Vec<_> = (0..4).map(|i| sine(i, 6)).collect();
        data[2].label = Some(Label::Anomalous);
        let err = train(tiny_net(), &data, &[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let data: Vec<_> = (0..8).map(|i| sine(i, 12)).collect();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            minibatch_size: 8,
            epochs: 200,
            dropout_rate: 0.0,
            hidden_sizes: vec![4, 2],
            seed: 7,
            ..TrainConfig::default()
        };
        let a = train(tiny_net(), &data, &data, &cfg).unwrap();
        let b = train(tiny_net(), &data, &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        let final_train = mean_loss(&a.params, &data).unwrap();
        assert!(final_train <= 0.5 * a.initial_val_loss, "{final_train} vs {}", a.initial_val_loss);
        let best = a.history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.history[a.best_epoch.unwrap() - 1].val_loss, best);
    }

    fn space() -> SearchSpace {
        SearchSpace {
            learning_rate: Interval { min: 1e-3, max: 1e-2 },
            minibatch_size: Interval { min: 2, max: 4 },
            weight_decay: Interval::point(0.0),
            dropout_rate: Interval { min: 0.0, max: 0.2 },
            trial_epochs: 2,
            base: TrainConfig {
                hidden_sizes: vec![4, 2],
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn search_is_deterministic() {
        let data: Vec<_> = (0..6).map(|i| sine(i, 8)).collect();
        let a = hyper_search(&space(), 3, 1, &data, &data).unwrap();
        let b = hyper_search(&space(), 3, 1, &data, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials.len(), 3);
        assert_eq!(a.best.epochs, 10);
        let one = hyper_search(&space(), 1, 5, &data, &data).unwrap();
        assert_eq!(one.best.learning_rate, one.trials[0].config.learning_rate);
    }

    #[test]
    fn search_degenerate_and_empty_spaces() {
        let data: Vec<_> = (0..6).map(|i| sine(i, 8)).collect();
        let mut s = space();
        s.learning_rate = Interval::point(5e-3);
        s.minibatch_size = Interval::point(3);
        s.dropout_rate = Interval::point(0.1);
        let r = hyper_search(&s, 2, 3, &data, &data).unwrap();
        assert_eq!((r.best.learning_rate, r.best.minibatch_size, r.best.dropout_rate), (5e-3, 3, 0.1));

        s.weight_decay = Interval { min: 1.0, max: 0.0 };
        assert!(matches!(hyper_search(&s, 2, 3, &data, &data), Err(Error::Config(_))));
        assert!(hyper_search(&space(), 0, 3, &data, &data).is_err());
    }
}
