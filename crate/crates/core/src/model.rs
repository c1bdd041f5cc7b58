//! The persisted monitor: autoencoder weights, normalization, the fitted
//! error Gaussian and threshold, stored as one self-describing JSON file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anomaly::{anomaly_score, ErrorGaussian, ScoredBatch, Threshold};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::neural::{AutoencoderParams, GATE_ORDER};
use crate::signal::{apply_normalizer, NormalizationStats, VibrationBatch};

pub const MODEL_FORMAT: &str = "rotorwatch-model";
pub const MODEL_VERSION: u32 = 1;

/// Sub-windowing of long batches before they reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub length: usize,
    pub stride: usize,
}

/// Splits every batch into windows, or passes them through unchanged.
pub fn windowed(batches: &[VibrationBatch], window: Option<WindowSpec>) -> Result<Vec<VibrationBatch>> {
    match window {
        None => Ok(batches.to_vec()),
        Some(w) => {
            let mut out = Vec::new();
            for b in batches {
                out.extend(b.windows(w.length, w.stride)?);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorModel {
    format: String,
    version: u32,
    gate_order: Vec<String>,
    pub autoencoder: AutoencoderParams,
    pub normalization: NormalizationStats,
    #[serde(default)]
    pub window: Option<WindowSpec>,
    #[serde(default)]
    pub gaussian: Option<ErrorGaussian>,
    #[serde(default)]
    pub threshold: Option<Threshold>,
}

impl MonitorModel {
    pub fn new(autoencoder: AutoencoderParams, normalization: NormalizationStats, window: Option<WindowSpec>) -> Self {
        MonitorModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            gate_order: GATE_ORDER.iter().map(|g| g.to_string()).collect(),
            autoencoder,
            normalization,
            window,
            gaussian: None,
            threshold: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.autoencoder.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Validation(format!("not a model file (format {:?})", self.format)));
        }
        if self.version != MODEL_VERSION {
            return Err(Error::Validation(format!("unsupported model version {}", self.version)));
        }
        if self.gate_order.iter().map(String::as_str).ne(GATE_ORDER.iter().copied()) {
            return Err(Error::Validation(format!("unsupported gate order {:?}", self.gate_order)));
        }
        self.autoencoder.validate()?;
        let d = self.channels();
        if self.normalization.per_channel_mean.len() != d || self.normalization.per_channel_std.len() != d {
            return Err(Error::dimension("normalization channels", d, self.normalization.channels()));
        }
        if self.normalization.per_channel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Validation("normalization std must be positive".into()));
        }
        if let Some(g) = &self.gaussian {
            if g.dim() != d {
                return Err(Error::dimension("error Gaussian dimension", d, g.dim()));
            }
        }
        if let Some(w) = self.window {
            if w.length < 2 || w.stride == 0 {
                return Err(Error::Validation(format!("bad window {w:?}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut model: MonitorModel = read_json(path)?;
        model.validate().map_err(|e| match e {
            Error::Validation(m) => Error::Format {
                path: path.to_path_buf(),
                message: m,
            },
            other => other,
        })?;
        model.gaussian = model.gaussian.map(ErrorGaussian::revalidated).transpose()?;
        Ok(model)
    }

    fn check_channels(&self, batch: &VibrationBatch) -> Result<()> {
        if batch.channels() != self.channels() {
            return Err(Error::dimension(
                format!("channels of batch {} (model expects)", batch.batch_index),
                self.channels(),
                batch.channels(),
            ));
        }
        Ok(())
    }

    /// Per-channel reconstruction MSE of a raw batch, averaged over windows.
    pub fn batch_error(&self, batch: &VibrationBatch) -> Result<Vec<f64>> {
        self.check_channels(batch)?;
        let normalized = apply_normalizer(batch, &self.normalization)?;
        let pieces = windowed(std::slice::from_ref(&normalized), self.window)?;
        let mut acc = vec![0.0; self.channels()];
        for w in &pieces {
            let (_, err) = self.autoencoder.reconstruct(w)?;
            for (a, e) in acc.iter_mut().zip(&err.per_channel) {
                *a += e;
            }
        }
        let n = pieces.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    /// Latent code of a raw batch, averaged over windows.
    pub fn batch_latent(&self, batch: &VibrationBatch) -> Result<Vec<f64>> {
        self.check_channels(batch)?;
        let normalized = apply_normalizer(batch, &self.normalization)?;
        let pieces = windowed(std::slice::from_ref(&normalized), self.window)?;
        let mut acc = vec![0.0; self.autoencoder.architecture.latent_size()];
        for w in &pieces {
            for (a, z) in acc.iter_mut().zip(self.autoencoder.latent(w)?.0) {
                *a += z;
            }
        }
        let n = pieces.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    pub fn score(&self, batch: &VibrationBatch) -> Result<ScoredBatch> {
        let g = self
            .gaussian
            .as_ref()
            .ok_or_else(|| Error::Validation("model has no fitted error Gaussian".into()))?;
        let errors = self.batch_error(batch)?;
        Ok(ScoredBatch {
            batch_index: batch.batch_index,
            score: anomaly_score(&errors, g)?,
            errors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anomaly::fit_error_gaussian;
    use crate::neural::Architecture;

    fn model() -> MonitorModel {
        let ae = AutoencoderParams::init(Architecture::new(2, vec![4, 2]).unwrap(), 0.1, 3).unwrap();
        let norm = NormalizationStats {
            per_channel_mean: vec![0.5, -1.0],
            per_channel_std: vec![2.0, 0.25],
        };
        MonitorModel::new(ae, norm, None)
    }

    fn batch(d: usize, phase: f64) -> VibrationBatch {
        let data = (0..12 * d).map(|k| (k as f64 * 0.3 + phase).sin()).collect();
        VibrationBatch::new("m", 0, d, data, None).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model();
        let errs: Vec<Vec<f64>> = (0..6).map(|i| m.batch_error(&batch(2, i as f64)).unwrap()).collect();
        m.gaussian = Some(fit_error_gaussian(&errs).unwrap());
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let back = MonitorModel::load(&path).unwrap();
        assert_eq!(back.autoencoder, m.autoencoder);
        assert_eq!(back.normalization, m.normalization);
        let b = batch(2, 0.7);
        assert_eq!(back.batch_error(&b).unwrap(), m.batch_error(&b).unwrap());
        let (s0, s1) = (m.score(&b).unwrap().score, back.score(&b).unwrap().score);
        assert!((s0 - s1).abs() <= 1e-9 * s0.abs().max(1.0));
    }

    #[test]
    fn channel_mismatch_names_dimensions() {
        let err = model().batch_error(&batch(3, 0.0)).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('3'), "{err}");
    }

    #[test]
    fn corrupted_shapes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut m = model();
        m.autoencoder.weights.projection.bias.push(0.0);
        write_json(&path, &m).unwrap();
        assert!(MonitorModel::load(&path).is_err());

        let mut m = model();
        m.gate_order.reverse();
        write_json(&path, &m).unwrap();
        assert!(MonitorModel::load(&path).is_err());
    }

    #[test]
    fn windowed_error_averages_windows() {
        let mut m = model();
        m.window = Some(WindowSpec { length: 6, stride: 6 });
        let b = batch(2, 0.1);
        let whole = m.batch_error(&b).unwrap();
        let norm = apply_normalizer(&b, &m.normalization).unwrap();
        let parts = norm.windows(6, 6).unwrap();
        for j in 0..2 {
            let manual: f64 = parts
                .iter()
                .map(|w| m.autoencoder.reconstruct(w).unwrap().1.per_channel[j])
                .sum::<f64>()
                / 2.0;
            assert!((whole[j] - manual).abs() < 1e-15);
        }
    }
}
