//! Synthetic colored-glyph datasets, counterfactual recoloring, the
//! crop-and-resize patch operator, and on-disk formats.

pub mod bundle;
pub mod export;
mod glyph;

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{read_bundle, read_head, write_bundle, write_head, ActivationBundle, BundleError, HeadParams};

pub const MAX_CLASSES: usize = 10;

/// Fixed RGB palette; class `y` is biased toward `PALETTE[y]`.
pub const PALETTE: [[f32; 3]; MAX_CLASSES] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.5, 1.0, 0.0],
    [0.6, 0.6, 0.6],
];

pub const PALETTE_NAMES: [&str; MAX_CLASSES] = [
    "red",
    "green",
    "blue",
    "yellow",
    "magenta",
    "cyan",
    "orange",
    "purple",
    "chartreuse",
    "gray",
];

/// Gray used for color-neutral counterfactuals.
pub const NEUTRAL_GRAY: [f32; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("patch size {size} does not fit a {height}x{width} image")]
    PatchTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file {path}: {reason}")]
    Format { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Audit,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Audit => "audit",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "audit" => Some(Split::Audit),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Audit => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How colors relate to labels within a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    /// Color follows `PALETTE[label]` with probability `rho`.
    Biased,
    /// Color is uniform over the palette, independent of the label.
    Unbiased,
    /// Color follows `PALETTE[(label + 1) mod C]` with probability `rho`.
    Shifted,
}

/// The color a split's correlation points to for `label`, or `None` when unbiased.
pub fn assignment(mode: BiasMode, label: usize, num_classes: usize) -> Option<usize> {
    match mode {
        BiasMode::Biased => Some(label),
        BiasMode::Shifted => Some((label + 1) % num_classes),
        BiasMode::Unbiased => None,
    }
}

/// RGB image, `height × width × 3`, interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width * 3, "pixel buffer size");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width * 3])
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Colors a grayscale mask: each pixel becomes `intensity × color`.
    pub fn from_mask(height: usize, width: usize, mask: &[f32], color: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(mask.len() * 3);
        for &m in mask {
            pixels.extend(color.iter().map(|&c| m * c));
        }
        Self::new(height, width, pixels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// Grayscale foreground intensity, `height × width`.
    pub glyph: Vec<f32>,
    pub image: Image,
    pub label: usize,
    pub bias_color: Option<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_audit: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Probability that a sample carries its split's assigned color.
    pub rho: f64,
    /// Coloring of the training split.
    pub bias_mode: BiasMode,
    /// Coloring of the bias-audit split.
    pub audit_bias: BiasMode,
    /// Coloring of the test split.
    pub test_bias: BiasMode,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            n_audit: 10_000,
            n_test: 2_000,
            num_classes: 10,
            height: 28,
            width: 28,
            rho: 0.95,
            bias_mode: BiasMode::Biased,
            audit_bias: BiasMode::Unbiased,
            test_bias: BiasMode::Unbiased,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(DataError::InvalidSpec(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(DataError::InvalidSpec(format!(
                "num_classes {} outside 2..={MAX_CLASSES}",
                self.num_classes
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(DataError::InvalidSpec("image dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.height * self.width * 3
    }

    fn mode_for(&self, split: Split) -> BiasMode {
        match split {
            Split::Train => self.bias_mode,
            Split::Audit => self.audit_bias,
            Split::Test => self.test_bias,
        }
    }
}

/// Derives an independent stream per sample so generation order never matters.
pub(crate) fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(seed ^ stream.rotate_left(40)) ^ index)
}

fn pick_color<G: Rng>(mode: BiasMode, label: usize, spec: &DatasetSpec, rng: &mut G) -> usize {
    let c = spec.num_classes;
    match assignment(mode, label, c) {
        None => rng.random_range(0..c),
        Some(assigned) => {
            if rng.random::<f64>() < spec.rho {
                assigned
            } else {
                let others: Vec<usize> = (0..c).filter(|&k| k != assigned).collect();
                *others.choose(rng).expect("at least two classes")
            }
        }
    }
}

/// Generates the train, audit, and test splits, in that order.
///
/// Sample ids are positions in the returned list.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    let plan: Vec<(Split, usize)> = [
        (Split::Train, spec.n_train),
        (Split::Audit, spec.n_audit),
        (Split::Test, spec.n_test),
    ]
    .iter()
    .flat_map(|&(split, n)| (0..n).map(move |i| (split, i)))
    .collect();

    Ok(plan
        .par_iter()
        .enumerate()
        .map(|(id, &(split, i))| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, split.tag(), i as u64));
            let label = rng.random_range(0..spec.num_classes);
            let color = pick_color(spec.mode_for(split), label, spec, &mut rng);
            let glyph = glyph::render(label, spec.height, spec.width, &mut rng);
            let image = Image::from_mask(spec.height, spec.width, &glyph, PALETTE[color]);
            Sample {
                id,
                glyph,
                image,
                label,
                bias_color: Some(color),
                split,
            }
        })
        .collect())
}

/// Target of a counterfactual recoloring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recolor {
    Color(usize),
    Neutral,
}

/// Repaints the foreground of `sample`, keeping its grayscale intensities.
///
/// `bias_color` becomes the new color (absent for the neutral gray).
pub fn recolor(sample: &Sample, target: Recolor) -> Sample {
    let (rgb, color) = match target {
        Recolor::Color(c) => (PALETTE[c], Some(c)),
        Recolor::Neutral => (NEUTRAL_GRAY, None),
    };
    Sample {
        image: Image::from_mask(sample.image.height, sample.image.width, &sample.glyph, rgb),
        bias_color: color,
        ..sample.clone()
    }
}

/// Grid position and content of one crop-and-resize patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub image: Image,
}

fn check_patch(image: &Image, size: usize, stride: usize) -> Result<(), DataError> {
    if size == 0 || size > image.height.min(image.width) {
        return Err(DataError::PatchTooLarge {
            size,
            height: image.height,
            width: image.width,
        });
    }
    if stride == 0 {
        return Err(DataError::ZeroStride);
    }
    Ok(())
}

/// Top-left corners of every `size × size` window on the stride grid.
pub fn patch_grid(
    height: usize,
    width: usize,
    size: usize,
    stride: usize,
) -> Vec<(usize, usize)> {
    let rows = (height - size) / stride + 1;
    let cols = (width - size) / stride + 1;
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i * stride, j * stride)))
        .collect()
}

/// Default stride for a patch size: `max(1, size / 2)`.
pub fn default_stride(size: usize) -> usize {
    (size / 2).max(1)
}

/// Crops the window at `(row, col)` and bilinearly resizes it back to full size
/// with corner-aligned sampling.
pub fn crop_resize(image: &Image, row: usize, col: usize, size: usize) -> Image {
    let (h, w) = (image.height, image.width);
    let map = |out: usize, extent: usize| -> f64 {
        if extent <= 1 {
            0.0
        } else {
            (out * (size - 1)) as f64 / (extent - 1) as f64
        }
    };
    let mut pixels = vec![0.0f32; h * w * 3];
    for y in 0..h {
        let sy = map(y, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(size - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..w {
            let sx = map(x, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(size - 1);
            let fx = (sx - x0 as f64) as f32;
            for c in 0..3 {
                let p00 = image.at(row + y0, col + x0, c);
                let p01 = image.at(row + y0, col + x1, c);
                let p10 = image.at(row + y1, col + x0, c);
                let p11 = image.at(row + y1, col + x1, c);
                let v = if fx == 0.0 && fy == 0.0 {
                    p00
                } else {
                    let top = p00 + (p01 - p00) * fx;
                    let bottom = p10 + (p11 - p10) * fx;
                    top + (bottom - top) * fy
                };
                pixels[(y * w + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(h, w, pixels)
}

/// The crop-and-resize operator: every `size × size` window on the stride
/// grid, each resized back to the input dimensions.
pub fn extract_patches(image: &Image, size: usize, stride: usize) -> Result<Vec<Patch>, DataError> {
    check_patch(image, size, stride)?;
    Ok(patch_grid(image.height, image.width, size, stride)
        .into_iter()
        .map(|(row, col)| Patch {
            row,
            col,
            image: crop_resize(image, row, col, size),
        })
        .collect())
}

/// Samples of one split, in id order.
pub fn split_of(samples: &[Sample], split: Split) -> Vec<Sample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}
