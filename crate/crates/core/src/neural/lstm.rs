use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gate blocks are stacked in this order along the `4h` axis.
pub const GATE_ORDER: [&str; 4] = ["input", "forget", "candidate", "output"];

/// One LSTM layer: `W` is `4h × in`, `R` is `4h × h`, `b` is `4h`, all
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub input_weights: Vec<f64>,
    pub recurrent_weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Everything the backward pass needs from one cell evaluation.
#[derive(Debug, Clone)]
pub struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LstmLayerParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        LstmLayerParams {
            input_size,
            hidden_size,
            input_weights: vec![0.0; 4 * hidden_size * input_size],
            recurrent_weights: vec![0.0; 4 * hidden_size * hidden_size],
            bias: vec![0.0; 4 * hidden_size],
        }
    }

    /// Uniform weights in `[−1/√h, 1/√h]` with the forget-gate bias at 1.
    pub fn init<R: Rng + ?Sized>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let mut layer = Self::zeros(input_size, hidden_size);
        for v in layer
            .input_weights
            .iter_mut()
            .chain(layer.recurrent_weights.iter_mut())
            .chain(layer.bias.iter_mut())
        {
            *v = rng.random_range(-bound..=bound);
        }
        layer.bias[hidden_size..2 * hidden_size].fill(1.0);
        layer
    }

    /// Checks that every buffer has the length implied by the sizes.
    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size;
        let checks = [
            ("input weights", 4 * h * self.input_size, self.input_weights.len()),
            ("recurrent weights", 4 * h * h, self.recurrent_weights.len()),
            ("bias", 4 * h, self.bias.len()),
        ];
        for (what, expected, found) in checks {
            if expected != found {
                return Err(Error::dimension(what, expected, found));
            }
        }
        if h == 0 || self.input_size == 0 {
            return Err(Error::Validation("LSTM layer sizes must be positive".into()));
        }
        if self
            .input_weights
            .iter()
            .chain(&self.recurrent_weights)
            .chain(&self.bias)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Validation("LSTM layer holds a non-finite weight".into()));
        }
        Ok(())
    }

    pub fn buffers(&self) -> [&[f64]; 3] {
        [&self.input_weights, &self.recurrent_weights, &self.bias]
    }

    pub fn buffers_mut(&mut self) -> [&mut [f64]; 3] {
        [
            &mut self.input_weights,
            &mut self.recurrent_weights,
            &mut self.bias,
        ]
    }

    /// Evaluates one timestep and keeps the intermediates.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<CellCache> {
        let h = self.hidden_size;
        if x.len() != self.input_size {
            return Err(Error::dimension("LSTM input", self.input_size, x.len()));
        }
        if h_prev.len() != h || c_prev.len() != h {
            return Err(Error::dimension("LSTM state", h, h_prev.len().max(c_prev.len())));
        }
        let n_in = self.input_size;
        let mut z = self.bias.clone();
        for (row, zr) in z.iter_mut().enumerate() {
            let w = &self.input_weights[row * n_in..(row + 1) * n_in];
            let r = &self.recurrent_weights[row * h..(row + 1) * h];
            *zr += w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                + r.iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
        }
        let i: Vec<f64> = z[..h].iter().map(|&v| logistic(v)).collect();
        let f: Vec<f64> = z[h..2 * h].iter().map(|&v| logistic(v)).collect();
        let g: Vec<f64> = z[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * h..].iter().map(|&v| logistic(v)).collect();
        let c: Vec<f64> = (0..h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h_t: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
        if c.iter().chain(&h_t).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite LSTM state".into()));
        }
        Ok(CellCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            i,
            f,
            g,
            o,
            tanh_c,
            c,
            h: h_t,
        })
    }

    /// Backpropagates through one cached step.
    ///
    /// `dh` and `dc_next` are the loss gradients with respect to this step's
    /// `h` and `c`. Parameter gradients are accumulated into `grads`; the
    /// return value is `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &self,
        s: &CellCache,
        dh: &[f64],
        dc_next: &[f64],
        grads: &mut LstmLayerParams,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden_size;
        let n_in = self.input_size;
        let mut dz = vec![0.0; 4 * h];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let d_o = dh[k] * s.tanh_c[k];
            let dc = dc_next[k] + dh[k] * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
            let di = dc * s.g[k];
            let dg = dc * s.i[k];
            let df = dc * s.c_prev[k];
            dc_prev[k] = dc * s.f[k];
            dz[k] = di * s.i[k] * (1.0 - s.i[k]);
            dz[h + k] = df * s.f[k] * (1.0 - s.f[k]);
            dz[2 * h + k] = dg * (1.0 - s.g[k] * s.g[k]);
            dz[3 * h + k] = d_o * s.o[k] * (1.0 - s.o[k]);
        }

        let mut dx = vec![0.0; n_in];
        let mut dh_prev = vec![0.0; h];
        for (row, &d) in dz.iter().enumerate() {
            grads.bias[row] += d;
            if d == 0.0 {
                continue;
            }
            let w = &self.input_weights[row * n_in..(row + 1) * n_in];
            let gw = &mut grads.input_weights[row * n_in..(row + 1) * n_in];
            for c in 0..n_in {
                gw[c] += d * s.x[c];
                dx[c] += w[c] * d;
            }
            let r = &self.recurrent_weights[row * h..(row + 1) * h];
            let gr = &mut grads.recurrent_weights[row * h..(row + 1) * h];
            for c in 0..h {
                gr[c] += d * s.h_prev[c];
                dh_prev[c] += r[c] * d;
            }
        }
        (dx, dh_prev, dc_prev)
    }
}

/// Standard gated LSTM update; returns `(h_t, c_t)`.
pub fn lstm_cell_forward(
    params: &LstmLayerParams,
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = params.step(x_t, h_prev, c_prev)?;
    Ok((s.h, s.c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_state() {
        let p = LstmLayerParams::zeros(3, 2);
        let (h, c) = lstm_cell_forward(&p, &[1.0, -4.0, 9.0], &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(h, vec![0.0; 2]);
        assert_eq!(c, vec![0.0; 2]);
    }

    #[test]
    fn saturated_gates_accumulate_candidate() {
        let mut p = LstmLayerParams::zeros(1, 2);
        let h = 2;
        p.bias[..2 * h].fill(50.0);
        p.bias[2 * h] = 0.3;
        p.bias[2 * h + 1] = -1.2;
        let c_prev = [0.5, 2.0];
        let (_, c) = lstm_cell_forward(&p, &[7.0], &[0.1, 0.2], &c_prev).unwrap();
        assert!((c[0] - (0.5 + 0.3f64.tanh())).abs() < 1e-12);
        assert!((c[1] - (2.0 + (-1.2f64).tanh())).abs() < 1e-12);
    }

    #[test]
    fn mismatched_input_rejected() {
        let p = LstmLayerParams::zeros(3, 2);
        assert!(matches!(
            lstm_cell_forward(&p, &[1.0], &[0.0; 2], &[0.0; 2]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn single_step_gradient_matches_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = LstmLayerParams::init(3, 4, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let hp = [0.1, -0.2, 0.05, 0.4];
        let cp = [0.5, -0.1, 0.2, -0.3];
        // scalar objective: sum(h) + 0.5·sum(c)
        let obj = |p: &LstmLayerParams, x: &[f64]| {
            let s = p.step(x, &hp, &cp).unwrap();
            s.h.iter().sum::<f64>() + 0.5 * s.c.iter().sum::<f64>()
        };
        let s = p.step(&x, &hp, &cp).unwrap();
        let mut g = LstmLayerParams::zeros(3, 4);
        let (dx, _, _) = p.step_backward(&s, &[1.0; 4], &[0.5; 4], &mut g);
        let eps = 1e-6;
        for k in 0..p.input_weights.len() {
            let mut q = p.clone();
            q.input_weights[k] += eps;
            let up = obj(&q, &x);
            q.input_weights[k] -= 2.0 * eps;
            let fd = (up - obj(&q, &x)) / (2.0 * eps);
            assert!((fd - g.input_weights[k]).abs() < 1e-8, "w[{k}]");
        }
        for c in 0..3 {
            let mut xp = x;
            xp[c] += eps;
            let up = obj(&p, &xp);
            xp[c] -= 2.0 * eps;
            let fd = (up - obj(&p, &xp)) / (2.0 * eps);
            assert!((fd - dx[c]).abs() < 1e-8, "x[{c}]");
        }
    }
}
