//! Stacked LSTM encoder/decoder with exact backpropagation through time.
//!
//! Layout, for encoder hidden sizes `h₁ > h₂ > … > h_L` and `d` channels:
//!
//! * encoder layer `l` reads the previous layer's hidden output after ReLU
//!   and dropout (layer 1 reads the raw sample);
//! * the decoder mirrors the encoder (`h_L, …, h₁`) and its layer `k`
//!   starts from the final `(h, c)` of encoder layer `L − k + 1`;
//! * the first decoder layer is fed the previous reconstructed sample (zero
//!   at the first step) and the top decoder state goes through a linear
//!   projection to `d` outputs.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{CellCache, LstmLayerParams};
use crate::error::{Error, Result};
use crate::signal::VibrationBatch;

/// Dense affine map `y = W h + b` with `W` stored `out × in` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub input_size: usize,
    pub output_size: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Projection {
    fn zeros(input_size: usize, output_size: usize) -> Self {
        Projection {
            input_size,
            output_size,
            weights: vec![0.0; input_size * output_size],
            bias: vec![0.0; output_size],
        }
    }

    fn apply(&self, h: &[f64]) -> Vec<f64> {
        (0..self.output_size)
            .map(|r| {
                let w = &self.weights[r * self.input_size..(r + 1) * self.input_size];
                self.bias[r] + w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.input_size * self.output_size {
            return Err(Error::dimension(
                "projection weights",
                self.input_size * self.output_size,
                self.weights.len(),
            ));
        }
        if self.bias.len() != self.output_size {
            return Err(Error::dimension("projection bias", self.output_size, self.bias.len()));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("projection holds a non-finite weight".into()));
        }
        Ok(())
    }
}

/// All trainable tensors. Also used for gradients and optimizer moments,
/// which share the exact same shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub encoder: Vec<LstmLayerParams>,
    pub decoder: Vec<LstmLayerParams>,
    pub projection: Projection,
}

/// Gradients are congruent to the weights they differentiate.
pub type Gradients = Weights;

impl Weights {
    pub fn zeros_like(&self) -> Self {
        Weights {
            encoder: self
                .encoder
                .iter()
                .map(|l| LstmLayerParams::zeros(l.input_size, l.hidden_size))
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| LstmLayerParams::zeros(l.input_size, l.hidden_size))
                .collect(),
            projection: Projection::zeros(self.projection.input_size, self.projection.output_size),
        }
    }

    /// Every buffer in a fixed order: encoder layers, decoder layers,
    /// projection weights, projection bias.
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in self.encoder.iter().chain(&self.decoder) {
            out.extend(l.buffers());
        }
        out.push(&self.projection.weights);
        out.push(&self.projection.bias);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend(l.buffers_mut());
        }
        out.push(&mut self.projection.weights);
        out.push(&mut self.projection.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.buffers().concat()
    }

    /// Global L2 norm over all buffers.
    pub fn norm(&self) -> f64 {
        self.buffers()
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for b in self.buffers_mut() {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Weights) {
        for (a, b) in self.buffers_mut().into_iter().zip(other.buffers()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// True when `other` has the same buffer layout.
    pub fn congruent(&self, other: &Weights) -> bool {
        let a = self.buffers();
        let b = other.buffers();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_sizes: Vec<usize>) -> Result<Self> {
        let arch = Architecture {
            input_dim,
            hidden_sizes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "encoder hidden sizes must be non-empty and positive: {:?}",
                self.hidden_sizes
            )));
        }
        if self.hidden_sizes.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "encoder hidden sizes must strictly decrease: {:?}",
                self.hidden_sizes
            )));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        *self.hidden_sizes.last().expect("validated non-empty")
    }

    /// `(input, hidden)` sizes of the decoder layers in evaluation order.
    fn decoder_shapes(&self) -> Vec<(usize, usize)> {
        let rev: Vec<usize> = self.hidden_sizes.iter().rev().copied().collect();
        rev.iter()
            .enumerate()
            .map(|(k, &h)| (if k == 0 { self.input_dim } else { rev[k - 1] }, h))
            .collect()
    }

    fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        self.hidden_sizes
            .iter()
            .enumerate()
            .map(|(l, &h)| (if l == 0 { self.input_dim } else { self.hidden_sizes[l - 1] }, h))
            .collect()
    }
}

/// Weights plus the dropout rate applied between stacked layers in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderParams {
    pub architecture: Architecture,
    pub dropout_rate: f64,
    pub weights: Weights,
}

/// Final top-layer encoder hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

/// Per-channel mean squared error over a sequence and its channel mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionError {
    pub per_channel: Vec<f64>,
    pub scalar: f64,
}

impl ReconstructionError {
    /// `(1/T) Σₜ (xₜ[j] − x'ₜ[j])²` for each channel `j`.
    pub fn between(input: &VibrationBatch, reconstruction: &[Vec<f64>]) -> Self {
        let d = input.channels();
        let t_len = input.timesteps() as f64;
        let mut per_channel = vec![0.0; d];
        for (x, y) in input.rows().zip(reconstruction) {
            for j in 0..d {
                per_channel[j] += (x[j] - y[j]).powi(2);
            }
        }
        per_channel.iter_mut().for_each(|v| *v /= t_len);
        let scalar = per_channel.iter().sum::<f64>() / d as f64;
        ReconstructionError { per_channel, scalar }
    }
}

/// Encoder states for every layer and timestep plus dropout masks.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    steps: Vec<Vec<CellCache>>,
    masks: Vec<Vec<Option<Vec<f64>>>>,
}

impl EncoderPass {
    pub fn latent(&self) -> LatentCode {
        LatentCode(self.steps.last().and_then(|l| l.last()).expect("non-empty pass").h.clone())
    }

    fn final_state(&self, layer: usize) -> (&[f64], &[f64]) {
        let s = self.steps[layer].last().expect("non-empty pass");
        (&s.h, &s.c)
    }
}

/// Decoder states and the reconstructed sequence.
#[derive(Debug, Clone)]
pub struct DecoderPass {
    steps: Vec<Vec<CellCache>>,
    masks: Vec<Vec<Option<Vec<f64>>>>,
    pub reconstruction: Vec<Vec<f64>>,
}

/// Cached forward evaluation used by [`AutoencoderParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub encoder: EncoderPass,
    pub decoder: DecoderPass,
}

impl ForwardCache {
    /// Every hidden output that passes through an inter-layer ReLU, encoder
    /// first. Comparing their signs across perturbed passes tells whether a
    /// finite difference straddled a kink.
    pub fn relu_inputs(&self) -> Vec<f64> {
        let below_top = |steps: &[Vec<CellCache>]| -> Vec<f64> {
            steps[..steps.len() - 1]
                .iter()
                .flat_map(|layer| layer.iter().flat_map(|c| c.h.iter().copied()))
                .collect()
        };
        let mut out = below_top(&self.encoder.steps);
        out.extend(below_top(&self.decoder.steps));
        out
    }
}

fn relu_dropout(h: &[f64], mask: Option<&Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => h.iter().zip(m).map(|(v, k)| v.max(0.0) * k).collect(),
        None => h.iter().map(|v| v.max(0.0)).collect(),
    }
}

fn draw_mask(rng: Option<&mut (dyn RngCore + '_)>, size: usize, rate: f64) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(
        (0..size)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

/// Runs a stack of layers over one timestep, returning the caches and the
/// masks applied to each inter-layer hand-off.
fn stack_step(
    layers: &[LstmLayerParams],
    input: &[f64],
    prev: &[(Vec<f64>, Vec<f64>)],
    dropout: f64,
    mut rng: Option<&mut (dyn RngCore + '_)>,
) -> Result<(Vec<CellCache>, Vec<Option<Vec<f64>>>)> {
    let mut caches: Vec<CellCache> = Vec::with_capacity(layers.len());
    let mut masks = Vec::with_capacity(layers.len().saturating_sub(1));
    let mut feed = input.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        if l > 0 {
            let mask = draw_mask(rng.as_deref_mut(), layer.input_size, dropout);
            feed = relu_dropout(&caches[l - 1].h, mask.as_ref());
            masks.push(mask);
        }
        caches.push(layer.step(&feed, &prev[l].0, &prev[l].1)?);
    }
    Ok((caches, masks))
}

/// Transposes `[t][layer]` into `[layer][t]`.
fn by_layer<T>(per_step: Vec<Vec<T>>, layers: usize) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = (0..layers).map(|_| Vec::with_capacity(per_step.len())).collect();
    for step in per_step {
        for (l, item) in step.into_iter().enumerate() {
            out[l].push(item);
        }
    }
    out
}

impl AutoencoderParams {
    /// Seeded initialization of a fresh network.
    pub fn init(architecture: Architecture, dropout_rate: f64, seed: u64) -> Result<Self> {
        architecture.validate()?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!("dropout rate {dropout_rate} is outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = architecture
            .encoder_shapes()
            .into_iter()
            .map(|(i, h)| LstmLayerParams::init(i, h, &mut rng))
            .collect();
        let decoder = architecture
            .decoder_shapes()
            .into_iter()
            .map(|(i, h)| LstmLayerParams::init(i, h, &mut rng))
            .collect();
        let top = architecture.hidden_sizes[0];
        let mut projection = Projection::zeros(top, architecture.input_dim);
        let bound = 1.0 / (top as f64).sqrt();
        for w in projection.weights.iter_mut() {
            *w = rng.random_range(-bound..=bound);
        }
        Ok(AutoencoderParams {
            architecture,
            dropout_rate,
            weights: Weights {
                encoder,
                decoder,
                projection,
            },
        })
    }

    /// A network with every weight zero.
    pub fn zeros(architecture: Architecture) -> Result<Self> {
        let mut p = Self::init(architecture, 0.0, 0)?;
        for b in p.weights.buffers_mut() {
            b.fill(0.0);
        }
        Ok(p)
    }

    /// Checks every tensor shape against the architecture.
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation(format!(
                "dropout rate {} is outside [0, 1)",
                self.dropout_rate
            )));
        }
        let check_stack = |what: &str, layers: &[LstmLayerParams], shapes: Vec<(usize, usize)>| {
            if layers.len() != shapes.len() {
                return Err(Error::dimension(format!("{what} layer count"), shapes.len(), layers.len()));
            }
            for (k, (layer, (i, h))) in layers.iter().zip(shapes).enumerate() {
                if layer.input_size != i || layer.hidden_size != h {
                    return Err(Error::Validation(format!(
                        "{what} layer {k} is {}→{}, architecture requires {i}→{h}",
                        layer.input_size, layer.hidden_size
                    )));
                }
                layer.validate()?;
            }
            Ok(())
        };
        check_stack("encoder", &self.weights.encoder, self.architecture.encoder_shapes())?;
        check_stack("decoder", &self.weights.decoder, self.architecture.decoder_shapes())?;
        let p = &self.weights.projection;
        if p.input_size != self.architecture.hidden_sizes[0] || p.output_size != self.architecture.input_dim {
            return Err(Error::Validation(format!(
                "projection is {}→{}, architecture requires {}→{}",
                p.input_size, p.output_size, self.architecture.hidden_sizes[0], self.architecture.input_dim
            )));
        }
        p.validate()
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim
    }

    fn check_input(&self, batch: &VibrationBatch) -> Result<()> {
        if batch.channels() != self.input_dim() {
            return Err(Error::dimension("model input channels", self.input_dim(), batch.channels()));
        }
        Ok(())
    }

    fn encode_with(&self, batch: &VibrationBatch, mut rng: Option<&mut (dyn RngCore + '_)>) -> Result<EncoderPass> {
        self.check_input(batch)?;
        let layers = &self.weights.encoder;
        let mut state: Vec<(Vec<f64>, Vec<f64>)> = layers
            .iter()
            .map(|l| (vec![0.0; l.hidden_size], vec![0.0; l.hidden_size]))
            .collect();
        let mut steps = Vec::with_capacity(batch.timesteps());
        let mut masks = Vec::with_capacity(batch.timesteps());
        for x in batch.rows() {
            let (caches, m) = stack_step(layers, x, &state, self.dropout_rate, rng.as_deref_mut())?;
            for (s, c) in state.iter_mut().zip(&caches) {
                *s = (c.h.clone(), c.c.clone());
            }
            steps.push(caches);
            masks.push(m);
        }
        Ok(EncoderPass {
            steps: by_layer(steps, layers.len()),
            masks: by_layer(masks, layers.len() - 1),
        })
    }

    fn decode_with(&self, enc: &EncoderPass, timesteps: usize, mut rng: Option<&mut (dyn RngCore + '_)>) -> Result<DecoderPass> {
        let layers = &self.weights.decoder;
        let n = layers.len();
        let mut state: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .map(|k| {
                let (h, c) = enc.final_state(n - 1 - k);
                (h.to_vec(), c.to_vec())
            })
            .collect();
        let mut prev_output = vec![0.0; self.input_dim()];
        let mut steps = Vec::with_capacity(timesteps);
        let mut masks = Vec::with_capacity(timesteps);
        let mut reconstruction = Vec::with_capacity(timesteps);
        for _ in 0..timesteps {
            let (caches, m) = stack_step(layers, &prev_output, &state, self.dropout_rate, rng.as_deref_mut())?;
            for (s, c) in state.iter_mut().zip(&caches) {
                *s = (c.h.clone(), c.c.clone());
            }
            let y = self.weights.projection.apply(&caches[n - 1].h);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("non-finite reconstruction".into()));
            }
            prev_output.clone_from(&y);
            reconstruction.push(y);
            steps.push(caches);
            masks.push(m);
        }
        Ok(DecoderPass {
            steps: by_layer(steps, n),
            masks: by_layer(masks, n - 1),
            reconstruction,
        })
    }

    /// Runs the encoder from zero state; dropout is disabled.
    pub fn encode(&self, batch: &VibrationBatch) -> Result<(LatentCode, EncoderPass)> {
        let pass = self.encode_with(batch, None)?;
        Ok((pass.latent(), pass))
    }

    /// Unrolls the decoder for `timesteps` steps from the encoder's final states.
    pub fn decode(&self, encoded: &EncoderPass, timesteps: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self.decode_with(encoded, timesteps, None)?.reconstruction)
    }

    pub fn reconstruct(&self, batch: &VibrationBatch) -> Result<(Vec<Vec<f64>>, ReconstructionError)> {
        let (_, enc) = self.encode(batch)?;
        let rec = self.decode(&enc, batch.timesteps())?;
        let err = ReconstructionError::between(batch, &rec);
        Ok((rec, err))
    }

    /// Forward pass that keeps every intermediate. Passing an RNG enables
    /// dropout with fresh masks.
    pub fn forward(&self, batch: &VibrationBatch, mut rng: Option<&mut (dyn RngCore + '_)>) -> Result<ForwardCache> {
        let encoder = self.encode_with(batch, rng.as_deref_mut())?;
        let decoder = self.decode_with(&encoder, batch.timesteps(), rng)?;
        Ok(ForwardCache { encoder, decoder })
    }

    /// Scalar MSE over all timesteps and channels.
    pub fn loss(&self, batch: &VibrationBatch, cache: &ForwardCache) -> f64 {
        ReconstructionError::between(batch, &cache.decoder.reconstruction).scalar
    }

    /// Exact gradient of the scalar MSE of `batch` through the full
    /// encoder–decoder unroll.
    pub fn backward(&self, batch: &VibrationBatch, cache: &ForwardCache) -> Gradients {
        let mut grads = self.weights.zeros_like();
        let d = self.input_dim();
        let t_len = batch.timesteps();
        let n = self.weights.decoder.len();
        let scale = 2.0 / (t_len * d) as f64;
        let proj = &self.weights.projection;
        let dec = &cache.decoder;

        let mut dh_rec: Vec<Vec<f64>> = self.weights.decoder.iter().map(|l| vec![0.0; l.hidden_size]).collect();
        let mut dc_rec = dh_rec.clone();
        let mut dy_feed = vec![0.0; d];

        for t in (0..t_len).rev() {
            let x = batch.sample(t);
            let y = &dec.reconstruction[t];
            let dy: Vec<f64> = (0..d).map(|j| scale * (y[j] - x[j]) + dy_feed[j]).collect();

            let top = &dec.steps[n - 1][t].h;
            let mut dh = dh_rec[n - 1].clone();
            for (r, &g) in dy.iter().enumerate() {
                grads.projection.bias[r] += g;
                let w = &proj.weights[r * proj.input_size..(r + 1) * proj.input_size];
                let gw = &mut grads.projection.weights[r * proj.input_size..(r + 1) * proj.input_size];
                for c in 0..proj.input_size {
                    gw[c] += g * top[c];
                    dh[c] += w[c] * g;
                }
            }

            for k in (0..n).rev() {
                let step = &dec.steps[k][t];
                let (dx, dhp, dcp) =
                    self.weights.decoder[k].step_backward(step, &dh, &dc_rec[k], &mut grads.decoder[k]);
                dh_rec[k] = dhp;
                dc_rec[k] = dcp;
                if k > 0 {
                    dh = through_relu(&dh_rec[k - 1], &dx, &dec.steps[k - 1][t].h, dec.masks[k - 1][t].as_ref());
                } else {
                    dy_feed = dx;
                }
            }
        }

        let enc = &cache.encoder;
        let m = self.weights.encoder.len();
        let mut eh: Vec<Vec<f64>> = vec![Vec::new(); m];
        let mut ec: Vec<Vec<f64>> = vec![Vec::new(); m];
        for k in 0..n {
            eh[m - 1 - k] = std::mem::take(&mut dh_rec[k]);
            ec[m - 1 - k] = std::mem::take(&mut dc_rec[k]);
        }
        for t in (0..t_len).rev() {
            let mut dh = eh[m - 1].clone();
            for l in (0..m).rev() {
                let (dx, dhp, dcp) =
                    self.weights.encoder[l].step_backward(&enc.steps[l][t], &dh, &ec[l], &mut grads.encoder[l]);
                eh[l] = dhp;
                ec[l] = dcp;
                if l > 0 {
                    dh = through_relu(&eh[l - 1], &dx, &enc.steps[l - 1][t].h, enc.masks[l - 1][t].as_ref());
                }
            }
        }
        grads
    }

    /// Mean loss and mean gradient over several sequences. Each sequence gets
    /// its own dropout stream seeded from `seeds`; the reduction runs in input
    /// order so the result does not depend on thread scheduling.
    pub fn batch_gradient(
        &self,
        sequences: &[&VibrationBatch],
        seeds: Option<&[u64]>,
    ) -> Result<(f64, Gradients)> {
        use rayon::prelude::*;
        if sequences.is_empty() {
            return Err(Error::InsufficientData("empty minibatch".into()));
        }
        let parts: Vec<Result<(f64, Gradients)>> = sequences
            .par_iter()
            .enumerate()
            .map(|(i, seq)| {
                let mut rng = seeds.map(|s| ChaCha8Rng::seed_from_u64(s[i]));
                let cache = self.forward(seq, rng.as_mut().map(|r| r as &mut dyn RngCore))?;
                Ok((self.loss(seq, &cache), self.backward(seq, &cache)))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = self.weights.zeros_like();
        for part in parts {
            let (loss, g) = part?;
            total += loss;
            grads.add_assign(&g);
        }
        let inv = 1.0 / sequences.len() as f64;
        grads.scale(inv);
        Ok((total * inv, grads))
    }

    pub fn latent(&self, batch: &VibrationBatch) -> Result<LatentCode> {
        Ok(self.encode(batch)?.0)
    }
}

/// Gradient reaching a lower layer's hidden output: its recurrent term plus
/// the upper layer's input gradient pulled back through dropout and ReLU.
fn through_relu(recurrent: &[f64], dx: &[f64], h: &[f64], mask: Option<&Vec<f64>>) -> Vec<f64> {
    (0..h.len())
        .map(|c| {
            let gate = if h[c] > 0.0 { mask.map_or(1.0, |m| m[c]) } else { 0.0 };
            recurrent[c] + dx[c] * gate
        })
        .collect()
}

/// Latent codes of each batch, one row per batch.
pub fn extract_latent_features(params: &AutoencoderParams, batches: &[VibrationBatch]) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    batches
        .par_iter()
        .map(|b| params.latent(b).map(|z| z.0))
        .collect()
}
