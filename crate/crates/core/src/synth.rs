//! Seeded synthetic vibration data with ground truth: stationary sinusoids
//! plus Gaussian noise, planted anomalies, run-to-failure drift and fleets of
//! similar machines.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_json;
use crate::signal::{write_csv, write_labels, Label, VibrationBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnomalyMode {
    /// Sinusoid amplitudes multiplied by `factor`.
    Amplitude { factor: f64 },
    /// Spikes of random sign; their count is Poisson with mean
    /// `rate · T` (at least one). `magnitude` defaults to 5× the noise std.
    Impulse {
        rate: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        magnitude: Option<f64>,
    },
    /// Every frequency multiplied by `factor`.
    FrequencyShift { factor: f64 },
}

impl Default for AnomalyMode {
    fn default() -> Self {
        AnomalyMode::Amplitude { factor: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub machine_id: String,
    pub channels: usize,
    pub timesteps: usize,
    pub n_batches: usize,
    /// Cycles per sample, one list per channel.
    pub frequencies: Vec<Vec<f64>>,
    pub amplitudes: Vec<Vec<f64>>,
    /// Per-channel phase offset in radians; empty means zeros.
    pub phase_offsets: Vec<f64>,
    /// Start each batch at a random point of the waveform.
    pub random_phase: bool,
    pub noise_std: f64,
    pub anomaly: AnomalyMode,
    pub anomaly_fraction: f64,
    pub degradation_onset_fraction: f64,
    /// Relative amplitude growth per batch after onset.
    pub drift_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            machine_id: "rm-0".into(),
            channels: 3,
            timesteps: 64,
            n_batches: 200,
            frequencies: vec![vec![0.05, 0.13], vec![0.07], vec![0.03, 0.11]],
            amplitudes: vec![vec![1.0, 0.3], vec![0.8], vec![0.6, 0.4]],
            phase_offsets: Vec::new(),
            random_phase: true,
            noise_std: 0.1,
            anomaly: AnomalyMode::default(),
            anomaly_fraction: 0.1,
            degradation_onset_fraction: 0.8,
            drift_rate: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.timesteps < 2 || self.n_batches == 0 {
            return bad("channels, timesteps ≥ 2 and n_batches must be positive".into());
        }
        if self.frequencies.len() != self.channels || self.amplitudes.len() != self.channels {
            return bad(format!(
                "need frequency and amplitude lists for each of {} channels",
                self.channels
            ));
        }
        for (j, (f, a)) in self.frequencies.iter().zip(&self.amplitudes).enumerate() {
            if f.len() != a.len() || f.is_empty() {
                return bad(format!("channel {j} frequency/amplitude lists differ in length"));
            }
            if f.iter().chain(a).any(|v| !(*v > 0.0)) {
                return bad(format!("channel {j} frequencies and amplitudes must be positive"));
            }
        }
        if !self.phase_offsets.is_empty() && self.phase_offsets.len() != self.channels {
            return bad("phase_offsets must be empty or one per channel".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.anomaly_fraction) {
            return bad(format!("anomaly_fraction {} is outside [0, 1)", self.anomaly_fraction));
        }
        if !(self.drift_rate >= 0.0) {
            return bad("drift_rate must be non-negative".into());
        }
        match self.anomaly {
            AnomalyMode::Amplitude { factor } | AnomalyMode::FrequencyShift { factor } if !(factor > 0.0) => {
                bad("anomaly factor must be positive".into())
            }
            AnomalyMode::Impulse { rate, magnitude } if !(rate > 0.0) || magnitude.is_some_and(|m| !(m > 0.0)) => {
                bad("impulse rate and magnitude must be positive".into())
            }
            _ => Ok(()),
        }
    }

    fn phase(&self, j: usize) -> f64 {
        self.phase_offsets.get(j).copied().unwrap_or(0.0)
    }
}

/// How one batch deviates from the healthy waveform.
#[derive(Debug, Clone, Copy, Default)]
struct Perturbation {
    amplitude: f64,
    frequency: f64,
    impulses: Option<(f64, f64)>,
}

impl Perturbation {
    fn healthy() -> Self {
        Perturbation {
            amplitude: 1.0,
            frequency: 1.0,
            impulses: None,
        }
    }

    fn from_mode(mode: AnomalyMode, noise_std: f64) -> Self {
        let mut p = Self::healthy();
        match mode {
            AnomalyMode::Amplitude { factor } => p.amplitude = factor,
            AnomalyMode::FrequencyShift { factor } => p.frequency = factor,
            AnomalyMode::Impulse { rate, magnitude } => {
                p.impulses = Some((rate, magnitude.unwrap_or(5.0 * noise_std)));
            }
        }
        p
    }
}

fn render(config: &SynthConfig, index: usize, seed: u64, pert: Perturbation, label: Label) -> Result<VibrationBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.channels;
    let t_len = config.timesteps;
    let slowest = config
        .frequencies
        .iter()
        .flatten()
        .fold(f64::INFINITY, |m, f| m.min(*f));
    let start = if config.random_phase {
        rng.random_range(0.0..1.0 / slowest)
    } else {
        0.0
    };
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = vec![0.0; t_len * d];
    for t in 0..t_len {
        let time = t as f64 + start;
        for j in 0..d {
            let clean: f64 = config.frequencies[j]
                .iter()
                .zip(&config.amplitudes[j])
                .map(|(f, a)| pert.amplitude * a * (2.0 * PI * f * pert.frequency * time + config.phase(j)).sin())
                .sum();
            let eps = if config.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data[t * d + j] = clean + eps;
        }
    }
    if let Some((rate, magnitude)) = pert.impulses {
        let mean = rate * t_len as f64;
        let count = Poisson::new(mean)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng) as usize;
        for _ in 0..count.max(1) {
            let t = rng.random_range(0..t_len);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for j in 0..d {
                data[t * d + j] += sign * magnitude;
            }
        }
    }
    VibrationBatch::new(config.machine_id.clone(), index, d, data, Some(label))
}

fn batch_seeds(config: &SynthConfig) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.n_batches).map(|_| rng.random()).collect()
}

/// Healthy batches, all labeled normal.
pub fn generate_normal(config: &SynthConfig) -> Result<Vec<VibrationBatch>> {
    config.validate()?;
    batch_seeds(config)
        .into_iter()
        .enumerate()
        .map(|(i, s)| render(config, i, s, Perturbation::healthy(), Label::Normal))
        .collect()
}

/// Positions of the `round(fraction · n)` planted anomalies, ascending.
pub fn anomaly_positions(config: &SynthConfig) -> Vec<usize> {
    let k = (config.anomaly_fraction * config.n_batches as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut picks = rand::seq::index::sample(&mut rng, config.n_batches, k.min(config.n_batches)).into_vec();
    picks.sort_unstable();
    picks
}

/// Healthy batches with a seeded subset replaced by anomalies of the
/// configured mode.
pub fn generate_anomalous(config: &SynthConfig) -> Result<Vec<VibrationBatch>> {
    config.validate()?;
    if !(config.anomaly_fraction > 0.0) {
        return Err(Error::Config("anomaly_fraction must be positive".into()));
    }
    let positions = anomaly_positions(config);
    let bad = Perturbation::from_mode(config.anomaly, config.noise_std);
    batch_seeds(config)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if positions.binary_search(&i).is_ok() {
                render(config, i, s, bad, Label::Anomalous)
            } else {
                render(config, i, s, Perturbation::healthy(), Label::Normal)
            }
        })
        .collect()
}

/// Chronological run to failure. Batches before `k = ⌊onset · n⌋` are
/// healthy; from `k` on, amplitudes grow by `1 + drift_rate · (i − k + 1)`
/// and batches are labeled anomalous. Returns the batches and `k`.
pub fn generate_run_to_failure(config: &SynthConfig) -> Result<(Vec<VibrationBatch>, usize)> {
    config.validate()?;
    let f = config.degradation_onset_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Config(format!("degradation_onset_fraction {f} is outside (0, 1)")));
    }
    let onset = (f * config.n_batches as f64 + 1e-9).floor() as usize;
    let batches = batch_seeds(config)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if i < onset {
                render(config, i, s, Perturbation::healthy(), Label::Normal)
            } else {
                let severity = config.drift_rate * (i - onset + 1) as f64;
                let pert = Perturbation {
                    amplitude: 1.0 + severity,
                    ..Perturbation::healthy()
                };
                render(config, i, s, pert, Label::Anomalous)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((batches, onset))
}

/// Spread of per-machine deviations in fleet mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetJitter {
    /// Relative amplitude jitter, uniform in `±amplitude`.
    pub amplitude: f64,
    /// Per-channel phase offsets uniform in `±phase` radians.
    pub phase: f64,
}

impl Default for FleetJitter {
    fn default() -> Self {
        FleetJitter {
            amplitude: 0.1,
            phase: PI,
        }
    }
}

/// Configurations for `machines` machines of the same kind, each with its own
/// amplitudes, phase offsets, seed and id `rm-{k}`.
pub fn fleet(base: &SynthConfig, machines: usize, jitter: FleetJitter) -> Result<Vec<SynthConfig>> {
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed.wrapping_add(0xf1ee7));
    Ok((0..machines)
        .map(|k| {
            let mut c = base.clone();
            c.machine_id = format!("rm-{k}");
            c.seed = rng.random();
            for amps in c.amplitudes.iter_mut() {
                for a in amps.iter_mut() {
                    *a *= 1.0 + rng.random_range(-jitter.amplitude..=jitter.amplitude);
                }
            }
            c.phase_offsets = (0..c.channels)
                .map(|_| rng.random_range(-jitter.phase..=jitter.phase))
                .collect();
            c
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub machine_id: String,
    pub n_batches: usize,
    pub anomalous_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onset_index: Option<usize>,
}

impl GroundTruth {
    pub fn from_batches(batches: &[VibrationBatch], onset_index: Option<usize>) -> Self {
        GroundTruth {
            machine_id: batches.first().map(|b| b.machine_id.clone()).unwrap_or_default(),
            n_batches: batches.len(),
            anomalous_indices: batches.iter().filter(|b| b.is_anomalous()).map(|b| b.batch_index).collect(),
            onset_index,
        }
    }
}

/// Writes `data.csv`, `labels.csv` and `truth.json` into `dir`.
pub fn write_dataset(dir: &Path, batches: &[VibrationBatch], onset_index: Option<usize>) -> Result<()> {
    write_csv(batches, &dir.join("data.csv"))?;
    write_labels(batches, &dir.join("labels.csv"))?;
    write_json(&dir.join("truth.json"), &GroundTruth::from_batches(batches, onset_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{basic_stats, kurtosis};

    fn single_tone() -> SynthConfig {
        SynthConfig {
            channels: 1,
            frequencies: vec![vec![0.1]],
            amplitudes: vec![vec![2.0]],
            phase_offsets: vec![0.25],
            random_phase: false,
            noise_std: 0.0,
            n_batches: 3,
            timesteps: 16,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_tone_is_exact() {
        let b = generate_normal(&single_tone()).unwrap();
        for (t, v) in b[2].channel(0).iter().enumerate() {
            let expected = 2.0 * (2.0 * PI * 0.1 * t as f64 + 0.25).sin();
            assert!((v - expected).abs() < 1e-12);
        }
        assert!(b.iter().all(|b| b.label == Some(Label::Normal)));
    }

    #[test]
    fn seeded_reproducibility() {
        let c = SynthConfig { n_batches: 10, ..SynthConfig::default() };
        assert_eq!(generate_anomalous(&c).unwrap(), generate_anomalous(&c).unwrap());
        let other = SynthConfig { seed: 1, ..c.clone() };
        assert_ne!(generate_normal(&c).unwrap(), generate_normal(&other).unwrap());
    }

    #[test]
    fn variance_matches_closed_form() {
        let c = SynthConfig {
            timesteps: 8192,
            n_batches: 2,
            ..SynthConfig::default()
        };
        let b = generate_normal(&c).unwrap();
        for j in 0..3 {
            let expected: f64 = c.amplitudes[j].iter().map(|a| a * a / 2.0).sum::<f64>() + c.noise_std.powi(2);
            let s = basic_stats(&b[0].channel(j)).unwrap();
            assert!((s.std * s.std - expected).abs() < 0.05 * expected, "channel {j}");
        }
    }

    #[test]
    fn anomaly_count_is_exact() {
        let c = SynthConfig { n_batches: 100, anomaly_fraction: 0.1, ..SynthConfig::default() };
        let b = generate_anomalous(&c).unwrap();
        assert_eq!(b.iter().filter(|b| b.is_anomalous()).count(), 10);
        let zero = SynthConfig { anomaly_fraction: 0.0, ..c };
        assert!(generate_anomalous(&zero).is_err());
    }

    #[test]
    fn unit_amplitude_anomaly_is_a_no_op() {
        let c = SynthConfig {
            n_batches: 20,
            anomaly: AnomalyMode::Amplitude { factor: 1.0 },
            ..SynthConfig::default()
        };
        let anomalous = generate_anomalous(&c).unwrap();
        let normal = generate_normal(&c).unwrap();
        for (a, n) in anomalous.iter().zip(&normal) {
            assert_eq!(a.as_slice(), n.as_slice());
        }
    }

    #[test]
    fn impulses_raise_kurtosis() {
        let mut wins = 0;
        let trials = 40;
        for seed in 0..trials {
            let c = SynthConfig {
                n_batches: 20,
                timesteps: 256,
                anomaly: AnomalyMode::Impulse { rate: 0.02, magnitude: Some(3.0) },
                seed,
                ..SynthConfig::default()
            };
            let b = generate_anomalous(&c).unwrap();
            let mean_k = |anom: bool| {
                let ks: Vec<f64> = b
                    .iter()
                    .filter(|b| b.is_anomalous() == anom)
                    .map(|b| kurtosis(&b.channel(0)).unwrap())
                    .collect();
                ks.iter().sum::<f64>() / ks.len() as f64
            };
            wins += usize::from(mean_k(true) > mean_k(false));
        }
        assert!(wins as f64 >= 0.95 * trials as f64, "{wins}/{trials}");
    }

    #[test]
    fn run_to_failure_onset_and_growth() {
        let c = SynthConfig { n_batches: 100, degradation_onset_fraction: 0.8, ..SynthConfig::default() };
        let (b, k) = generate_run_to_failure(&c).unwrap();
        assert_eq!(k, 80);
        assert!(!b[79].is_anomalous() && b[80].is_anomalous());
        let rms = |i: usize| basic_stats(&b[i].channel(0)).unwrap().rms;
        assert!(rms(99) - rms(k) >= c.drift_rate * (100 - k) as f64 * 0.5);

        let flat = SynthConfig { drift_rate: 0.0, ..c };
        let (b0, _) = generate_run_to_failure(&flat).unwrap();
        let n0 = generate_normal(&flat).unwrap();
        assert_eq!(b0[95].as_slice(), n0[95].as_slice());
    }

    #[test]
    fn fleet_machines_differ() {
        let f = fleet(&SynthConfig::default(), 5, FleetJitter::default()).unwrap();
        assert_eq!(f.len(), 5);
        assert_eq!(f[3].machine_id, "rm-3");
        assert_ne!(f[0].amplitudes, f[1].amplitudes);
        assert_ne!(f[0].seed, f[1].seed);
        assert_eq!(f, fleet(&SynthConfig::default(), 5, FleetJitter::default()).unwrap());
    }
}
