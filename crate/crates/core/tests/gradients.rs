//! Analytic BPTT gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotorwatch_core::neural::{Architecture, AutoencoderParams};
use rotorwatch_core::VibrationBatch;

const STEP: f64 = 1e-3;
const FLOOR: f64 = 1e-7;

fn eval(p: &AutoencoderParams, b: &VibrationBatch) -> (f64, Vec<bool>) {
    let c = p.forward(b, None).unwrap();
    (p.loss(b, &c), c.relu_inputs().iter().map(|h| *h > 0.0).collect())
}

fn perturbed(p: &AutoencoderParams, buf: usize, k: usize, delta: f64) -> AutoencoderParams {
    let mut q = p.clone();
    q.weights.buffers_mut()[buf][k] += delta;
    q
}

/// Richardson-extrapolated central difference, or `None` when a ReLU input
/// changes sign inside the stencil.
fn numeric(p: &AutoencoderParams, b: &VibrationBatch, buf: usize, k: usize, pattern: &[bool]) -> Option<f64> {
    let mut d = [0.0; 2];
    for (slot, h) in [STEP, STEP / 2.0].into_iter().enumerate() {
        let (lp, sp) = eval(&perturbed(p, buf, k, h), b);
        let (lm, sm) = eval(&perturbed(p, buf, k, -h), b);
        if sp != pattern || sm != pattern {
            return None;
        }
        d[slot] = (lp - lm) / (2.0 * h);
    }
    Some((4.0 * d[1] - d[0]) / 3.0)
}

struct CheckStats {
    max_rel: f64,
    compared: usize,
    kinks: usize,
}

fn check(seed: u64, d: usize, t: usize, hidden: Vec<usize>) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = AutoencoderParams::init(Architecture::new(d, hidden).unwrap(), 0.0, rng.random()).unwrap();
    let data: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let b = VibrationBatch::new("g", 0, d, data, None).unwrap();
    let cache = p.forward(&b, None).unwrap();
    let analytic = p.backward(&b, &cache);
    let (_, pattern) = eval(&p, &b);
    let mut stats = CheckStats { max_rel: 0.0, compared: 0, kinks: 0 };
    for (buf, grads) in analytic.buffers().iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            match numeric(&p, &b, buf, k, &pattern) {
                Some(n) => {
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
                    stats.max_rel = stats.max_rel.max(rel);
                    stats.compared += 1;
                }
                None => stats.kinks += 1,
            }
        }
    }
    stats
}

#[test]
fn two_layer_network() {
    for seed in 0..20 {
        let s = check(seed, 2, 8, vec![6, 3]);
        assert!(s.max_rel < 1e-5, "seed {seed}: {}", s.max_rel);
        assert!(s.kinks * 20 < s.compared, "seed {seed}: {} kinks", s.kinks);
    }
}

#[test]
fn three_layer_network_more_channels() {
    for seed in 100..105 {
        let s = check(seed, 3, 6, vec![7, 5, 2]);
        assert!(s.max_rel < 1e-5, "seed {seed}: {}", s.max_rel);
    }
}

#[test]
fn single_layer_network() {
    for seed in 200..205 {
        let s = check(seed, 4, 10, vec![3]);
        assert!(s.max_rel < 1e-5, "seed {seed}: {}", s.max_rel);
        assert_eq!(s.kinks, 0);
    }
}

