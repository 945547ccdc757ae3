//! Mini-batch SGD on softmax cross-entropy.
//!
//! Training runs in `f32` on a single thread. Inputs are mostly background, so
//! the first layer iterates only over non-zero input coordinates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, Dense, FrozenClassifier, ModelError};
use crate::data::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_period: usize,
    pub seed: u64,
    /// Hidden widths; the last one is the representation width `p`.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 0.01,
            lr_halving_period: 25,
            seed: 0,
            hidden: vec![100, 100],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.lr_halving_period == 0 {
            return bad("lr_halving_period must be at least 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be non-empty and positive");
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: FrozenClassifier,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    pub train_accuracy: f64,
}

struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: Vec<f32>,
    b: Vec<f32>,
    gw: Vec<f32>,
    gb: Vec<f32>,
}

impl Layer {
    fn glorot<G: Rng>(fan_in: usize, fan_out: usize, rng: &mut G) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        Self {
            fan_in,
            fan_out,
            w: (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
            b: vec![0.0; fan_out],
            gw: vec![0.0; fan_in * fan_out],
            gb: vec![0.0; fan_out],
        }
    }

    #[inline]
    fn row(&self, i: usize) -> &[f32] {
        &self.w[i * self.fan_out..(i + 1) * self.fan_out]
    }

    fn forward_sparse(&self, x: &[(u32, f32)], out: &mut [f32]) {
        out.copy_from_slice(&self.b);
        for &(i, v) in x {
            axpy(v, self.row(i as usize), out);
        }
    }

    fn forward_dense(&self, x: &[f32], out: &mut [f32]) {
        out.copy_from_slice(&self.b);
        for (i, &v) in x.iter().enumerate() {
            if v != 0.0 {
                axpy(v, self.row(i), out);
            }
        }
    }

    fn step(&mut self, scale: f32) {
        for (w, g) in self.w.iter_mut().zip(&mut self.gw) {
            *w -= scale * *g;
            *g = 0.0;
        }
        for (b, g) in self.b.iter_mut().zip(&mut self.gb) {
            *b -= scale * *g;
            *g = 0.0;
        }
    }

    fn freeze(self) -> Dense {
        Dense::new(self.fan_in, self.fan_out, self.w, self.b).expect("shapes fixed at construction")
    }
}

fn sparse(pixels: &[f32]) -> Vec<(u32, f32)> {
    pixels
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, &v)| (i as u32, v))
        .collect()
}

/// Softmax in place; returns the cross-entropy for class `y`.
fn softmax_xent(z: &mut [f32], y: usize) -> f64 {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    -(z[y].max(f32::MIN_POSITIVE) as f64).ln()
}

/// Trains an MLP `input → hidden… → num_classes` with ReLU after every hidden layer.
pub fn train(
    samples: &[Sample],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    cfg.validate()?;
    if num_classes == 0 {
        return Err(ModelError::InvalidConfig("num_classes must be positive".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for s in samples {
        if s.label >= num_classes {
            return Err(ModelError::InvalidClass {
                class: s.label,
                num_classes,
            });
        }
        counts[s.label] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(ModelError::EmptyClass(c));
    }
    let input_len = samples[0].image.pixels.len();
    for s in samples {
        if s.image.pixels.len() != input_len {
            return Err(ModelError::DimensionMismatch {
                expected: input_len,
                found: s.image.pixels.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut widths = vec![input_len];
    widths.extend(&cfg.hidden);
    widths.push(num_classes);
    let mut layers: Vec<Layer> = widths
        .windows(2)
        .map(|w| Layer::glorot(w[0], w[1], &mut rng))
        .collect();
    let depth = layers.len();

    let inputs: Vec<Vec<(u32, f32)>> = samples.iter().map(|s| sparse(&s.image.pixels)).collect();
    let mut acts: Vec<Vec<f32>> = widths[1..].iter().map(|&w| vec![0.0; w]).collect();
    let mut deltas: Vec<Vec<f32>> = widths[1..].iter().map(|&w| vec![0.0; w]).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut correct = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch) as f32;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            for &idx in batch {
                let x = &inputs[idx];
                let y = samples[idx].label;

                // Forward.
                layers[0].forward_sparse(x, &mut acts[0]);
                for l in 1..depth {
                    acts[l - 1].iter_mut().for_each(|v| *v = v.max(0.0));
                    let (prev, rest) = acts.split_at_mut(l);
                    layers[l].forward_dense(&prev[l - 1], &mut rest[0]);
                }
                let out = &mut acts[depth - 1];
                let pred = out
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > out[best] { i } else { best });
                correct += usize::from(pred == y);
                epoch_loss += softmax_xent(out, y);

                // Backward: delta of the output is softmax − onehot.
                deltas[depth - 1].copy_from_slice(&acts[depth - 1]);
                deltas[depth - 1][y] -= 1.0;
                for l in (0..depth).rev() {
                    let (lower, upper) = deltas.split_at_mut(l);
                    let delta = &upper[0];
                    let layer = &mut layers[l];
                    for (g, &d) in layer.gb.iter_mut().zip(delta) {
                        *g += d;
                    }
                    if l == 0 {
                        for &(i, v) in x {
                            let i = i as usize;
                            axpy(v, delta, &mut layer.gw[i * layer.fan_out..(i + 1) * layer.fan_out]);
                        }
                    } else {
                        let input = &acts[l - 1];
                        let below = &mut lower[l - 1];
                        for (i, &v) in input.iter().enumerate() {
                            if v > 0.0 {
                                let fo = layer.fan_out;
                                axpy(v, delta, &mut layer.gw[i * fo..(i + 1) * fo]);
                                below[i] = layer.w[i * fo..(i + 1) * fo]
                                    .iter()
                                    .zip(delta)
                                    .map(|(w, d)| w * d)
                                    .sum();
                            } else {
                                below[i] = 0.0;
                            }
                        }
                    }
                }
            }
            let scale = lr / batch.len() as f32;
            for layer in &mut layers {
                layer.step(scale);
            }
        }
        let mean_loss = epoch_loss / samples.len() as f64;
        if !mean_loss.is_finite() || layers.iter().any(|l| l.w.iter().any(|v| !v.is_finite())) {
            return Err(ModelError::DivergedLoss { epoch });
        }
        loss_trace.push(mean_loss);
    }

    let head = layers.pop().expect("at least two layers").freeze();
    let feature_layers = layers.into_iter().map(Layer::freeze).collect();
    Ok(TrainReport {
        model: FrozenClassifier::from_layers(feature_layers, head)?,
        loss_trace,
        train_accuracy: correct as f64 / samples.len() as f64,
    })
}
