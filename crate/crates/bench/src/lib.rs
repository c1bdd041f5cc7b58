//! Shared fixtures for the benchmarks.

use rotorwatch_core::signal::VibrationBatch;

/// Deterministic multi-tone batch of `timesteps × channels`.
pub fn tone_batch(timesteps: usize, channels: usize) -> VibrationBatch {
    let data = (0..timesteps * channels)
        .map(|k| {
            let (t, j) = ((k / channels) as f64, (k % channels) as f64);
            (0.05 * (j + 1.0) * t).sin() + 0.3 * (0.21 * t + j).cos()
        })
        .collect();
    VibrationBatch::new("bench", 0, channels, data, None).expect("valid batch")
}
