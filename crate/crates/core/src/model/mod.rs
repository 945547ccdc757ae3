//! A small MLP split as `f = h ∘ g` at its last ReLU.
//!
//! `g` is a stack of affine + ReLU layers producing a non-negative
//! representation, `h` an affine head producing logits.

mod checkpoint;
mod train;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{HeadParams, Image};
use crate::linalg::Matrix;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use train::{train, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("class {0} has no training samples")]
    EmptyClass(usize),
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("class {class} outside 0..{num_classes}")]
    InvalidClass { class: usize, num_classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

/// Affine layer stored input-major: `weight[i * fan_out + j]` connects input `i` to output `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    fan_in: usize,
    fan_out: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Dense {
    /// `weight` is input-major (`fan_in × fan_out`).
    pub fn new(fan_in: usize, fan_out: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self, ModelError> {
        if weight.len() != fan_in * fan_out {
            return Err(ModelError::DimensionMismatch {
                expected: fan_in * fan_out,
                found: weight.len(),
            });
        }
        if bias.len() != fan_out {
            return Err(ModelError::DimensionMismatch {
                expected: fan_out,
                found: bias.len(),
            });
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(ModelError::Format("non-finite parameter".into()));
        }
        Ok(Self {
            fan_in,
            fan_out,
            weight,
            bias,
        })
    }

    /// Builds a layer from an output-major (`fan_out × fan_in`) weight.
    pub fn from_output_major(
        fan_in: usize,
        fan_out: usize,
        weight: &[f32],
        bias: Vec<f32>,
    ) -> Result<Self, ModelError> {
        if weight.len() != fan_in * fan_out {
            return Err(ModelError::DimensionMismatch {
                expected: fan_in * fan_out,
                found: weight.len(),
            });
        }
        let mut w = vec![0.0; weight.len()];
        for o in 0..fan_out {
            for i in 0..fan_in {
                w[i * fan_out + o] = weight[o * fan_in + i];
            }
        }
        Self::new(fan_in, fan_out, w, bias)
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Weight as `fan_out × fan_in`, row-major.
    pub fn output_major_weight(&self) -> Vec<f32> {
        let mut w = vec![0.0; self.weight.len()];
        for i in 0..self.fan_in {
            for o in 0..self.fan_out {
                w[o * self.fan_in + i] = self.weight[i * self.fan_out + o];
            }
        }
        w
    }

    #[inline]
    pub(crate) fn row(&self, i: usize) -> &[f32] {
        &self.weight[i * self.fan_out..(i + 1) * self.fan_out]
    }

    /// `bias + Σ_i x_i W[i, :]`, skipping zero inputs.
    pub(crate) fn forward(&self, x: &[f32], out: &mut [f32]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, self.row(i), out);
            }
        }
    }
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `−log softmax(logits)[y]`.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// The part of a classifier the gradient probe needs: logits and the
/// cross-entropy gradient with respect to the representation.
pub trait ClassifierHead: Sync {
    fn num_classes(&self) -> usize;
    /// Representation width `p`.
    fn width(&self) -> usize;
    fn logits(&self, a: &[f64]) -> Result<Vec<f64>, ModelError>;

    /// `∇_a L(h(a), y) = Wᵀ (softmax(W a + b) − onehot(y))`.
    fn gradient(&self, a: &[f64], y: usize) -> Result<Vec<f64>, ModelError>;

    fn predict_from(&self, a: &[f64]) -> Result<usize, ModelError> {
        Ok(argmax(&self.logits(a)?))
    }
}

fn check_class(y: usize, num_classes: usize) -> Result<(), ModelError> {
    if y >= num_classes {
        return Err(ModelError::InvalidClass {
            class: y,
            num_classes,
        });
    }
    Ok(())
}

fn check_len(found: usize, expected: usize) -> Result<(), ModelError> {
    if found != expected {
        return Err(ModelError::DimensionMismatch { expected, found });
    }
    Ok(())
}

impl ClassifierHead for HeadParams {
    fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    fn width(&self) -> usize {
        self.weight.cols()
    }

    fn logits(&self, a: &[f64]) -> Result<Vec<f64>, ModelError> {
        check_len(a.len(), self.width())?;
        let z = self.weight.matvec(a).expect("checked width");
        Ok(z.iter().zip(&self.bias).map(|(z, b)| z + b).collect())
    }

    fn gradient(&self, a: &[f64], y: usize) -> Result<Vec<f64>, ModelError> {
        check_class(y, self.num_classes())?;
        let mut r = softmax(&self.logits(a)?);
        r[y] -= 1.0;
        Ok(self.weight.tr_matvec(&r).expect("class count matches"))
    }
}

/// A trained classifier with immutable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenClassifier {
    feature_layers: Vec<Dense>,
    head: Dense,
}

impl FrozenClassifier {
    /// Assembles a classifier; consecutive layer widths must chain.
    pub fn from_layers(feature_layers: Vec<Dense>, head: Dense) -> Result<Self, ModelError> {
        if feature_layers.is_empty() {
            return Err(ModelError::InvalidConfig(
                "at least one ReLU feature layer is required".into(),
            ));
        }
        for pair in feature_layers.windows(2) {
            check_len(pair[1].fan_in, pair[0].fan_out)?;
        }
        check_len(head.fan_in, feature_layers.last().expect("non-empty").fan_out)?;
        Ok(Self {
            feature_layers,
            head,
        })
    }

    pub fn feature_layers(&self) -> &[Dense] {
        &self.feature_layers
    }

    pub fn head_layer(&self) -> &Dense {
        &self.head
    }

    pub fn input_len(&self) -> usize {
        self.feature_layers[0].fan_in
    }

    /// Representation width `p`.
    pub fn representation_width(&self) -> usize {
        self.head.fan_in
    }

    pub fn classes(&self) -> usize {
        self.head.fan_out
    }

    /// Head as `C × p` parameters in `f64`.
    pub fn head_params(&self) -> HeadParams {
        let (p, c) = (self.head.fan_in, self.head.fan_out);
        let w = self.head.output_major_weight();
        HeadParams {
            weight: Matrix::new(c, p, w.iter().map(|&v| v as f64).collect())
                .expect("finite parameters"),
            bias: self.head.bias.iter().map(|&v| v as f64).collect(),
        }
    }

    pub(crate) fn features_f32(&self, input: &[f32]) -> Vec<f32> {
        let mut current = input.to_vec();
        for layer in &self.feature_layers {
            let mut out = vec![0.0f32; layer.fan_out];
            layer.forward(&current, &mut out);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            current = out;
        }
        current
    }

    /// `g(x)` on a flattened `H × W × 3` input.
    pub fn features_raw(&self, input: &[f32]) -> Result<Vec<f64>, ModelError> {
        check_len(input.len(), self.input_len())?;
        Ok(self.features_f32(input).into_iter().map(f64::from).collect())
    }

    /// `g(x)`; componentwise non-negative.
    pub fn features(&self, image: &Image) -> Result<Vec<f64>, ModelError> {
        self.features_raw(&image.pixels)
    }

    /// Stacks `g(x)` for many images, one row each, in input order.
    pub fn features_batch(&self, images: &[&Image]) -> Result<Matrix, ModelError> {
        let rows: Vec<Vec<f64>> = images
            .par_iter()
            .map(|img| self.features(img))
            .collect::<Result<_, _>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.representation_width()));
        }
        Ok(Matrix::from_rows(&rows).expect("finite features"))
    }

    /// `h(a)`.
    pub fn head_logits(&self, a: &[f64]) -> Result<Vec<f64>, ModelError> {
        check_len(a.len(), self.head.fan_in)?;
        let mut z: Vec<f64> = self.head.bias.iter().map(|&b| b as f64).collect();
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0.0 {
                for (zc, &w) in z.iter_mut().zip(self.head.row(i)) {
                    *zc += ai * w as f64;
                }
            }
        }
        Ok(z)
    }

    pub fn predict(&self, image: &Image) -> Result<usize, ModelError> {
        Ok(argmax(&self.head_logits(&self.features(image)?)?))
    }

    /// Exact gradient of the cross-entropy through the affine head.
    pub fn head_gradient(&self, a: &[f64], y: usize) -> Result<Vec<f64>, ModelError> {
        check_class(y, self.classes())?;
        let mut r = softmax(&self.head_logits(a)?);
        r[y] -= 1.0;
        Ok((0..self.head.fan_in)
            .map(|i| {
                self.head
                    .row(i)
                    .iter()
                    .zip(&r)
                    .map(|(&w, &rc)| w as f64 * rc)
                    .sum()
            })
            .collect())
    }
}

impl ClassifierHead for FrozenClassifier {
    fn num_classes(&self) -> usize {
        self.classes()
    }

    fn width(&self) -> usize {
        self.representation_width()
    }

    fn logits(&self, a: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.head_logits(a)
    }

    fn gradient(&self, a: &[f64], y: usize) -> Result<Vec<f64>, ModelError> {
        self.head_gradient(a, y)
    }
}
