//! Activation bundles: a portable record of one frozen model's representation,
//! logits, labels, and predictions on a labeled set.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ABF1" | version u32 = 1 | n u32 | p u32 | C u32 | flags u32 (bit0: bias attributes)
//! activations n·p f32 row-major | logits n·C f32 row-major
//! labels n u32 | predictions n u32 | [bias_attributes n u32]
//! layer_name: u32 length + UTF-8 | model_id: u32 length + UTF-8
//! [optional "HEAD" | C u32 | p u32 | weight C·p f32 row-major | bias C f32]
//! ```
//!
//! The optional `HEAD` section carries the affine classifier head so that the
//! gradient probe can run on models that live outside this process. Values are
//! stored as `f32`; in-memory `f64` values round on write.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::linalg::Matrix;

pub const BUNDLE_MAGIC: &[u8; 4] = b"ABF1";
pub const HEAD_MAGIC: &[u8; 4] = b"HEAD";
pub const BUNDLE_VERSION: u32 = 1;

const FLAG_BIAS_ATTRIBUTES: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad bundle format: {0}")]
    Format(String),
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u32),
    #[error("bundle integrity violated: {0}")]
    Integrity(String),
}

/// Affine classifier head `logits = W a + b`, `W` is `C × p`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl HeadParams {
    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn width(&self) -> usize {
        self.weight.cols()
    }

    fn write_section(&self, out: &mut Vec<u8>) -> Result<(), BundleError> {
        if self.bias.len() != self.num_classes() {
            return Err(BundleError::Integrity(format!(
                "{} head biases for {} classes",
                self.bias.len(),
                self.num_classes()
            )));
        }
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&to_u32(self.num_classes())?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.width())?.to_le_bytes());
        put_f32s(out, self.weight.as_slice());
        put_f32s(out, &self.bias);
        Ok(())
    }

    fn read_section(r: &mut Reader) -> Result<Self, BundleError> {
        if r.take(4)? != HEAD_MAGIC {
            return Err(BundleError::Format("expected a HEAD section".into()));
        }
        let c = r.u32()? as usize;
        let p = r.u32()? as usize;
        let weight = r.matrix(c, p)?;
        let bias = r.f32s(c)?;
        Ok(Self { weight, bias })
    }

    /// A standalone `HEAD` section, byte-identical to the one a bundle appends.
    pub fn to_bytes(&self) -> Result<Vec<u8>, BundleError> {
        let mut out = Vec::new();
        self.write_section(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BundleError> {
        let mut r = Reader { bytes, pos: 0 };
        let head = Self::read_section(&mut r)?;
        if r.remaining() != 0 {
            return Err(BundleError::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(head)
    }
}

/// Writes a companion head file for bundles exported without one.
pub fn write_head(head: &HeadParams, path: impl AsRef<Path>) -> Result<(), BundleError> {
    fs::write(path, head.to_bytes()?)?;
    Ok(())
}

pub fn read_head(path: impl AsRef<Path>) -> Result<HeadParams, BundleError> {
    HeadParams::from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBundle {
    /// `n × p`, non-negative.
    pub activations: Matrix,
    /// `n × C`.
    pub logits: Matrix,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub bias_attributes: Option<Vec<usize>>,
    pub layer_name: String,
    pub model_id: String,
    pub head: Option<HeadParams>,
}

/// Index of the largest value, lowest index on ties.
fn argmax_f32(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if (v as f32) > (row[best] as f32) {
            best = i;
        }
    }
    best
}

impl ActivationBundle {
    pub fn len(&self) -> usize {
        self.activations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.activations.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    /// Checks shapes, non-negativity, label range, and prediction/argmax agreement.
    pub fn validate(&self) -> Result<(), BundleError> {
        let n = self.activations.rows();
        let c = self.logits.cols();
        let integrity = |msg: String| Err(BundleError::Integrity(msg));
        if self.logits.rows() != n || self.labels.len() != n || self.predictions.len() != n {
            return integrity(format!(
                "row counts disagree: activations {n}, logits {}, labels {}, predictions {}",
                self.logits.rows(),
                self.labels.len(),
                self.predictions.len()
            ));
        }
        if let Some(b) = &self.bias_attributes {
            if b.len() != n {
                return integrity(format!("{} bias attributes for {n} rows", b.len()));
            }
        }
        if !self.activations.is_nonnegative() {
            return integrity("activations contain negative values".into());
        }
        if let Some(i) = self.labels.iter().position(|&y| y >= c) {
            return integrity(format!("label {} of row {i} outside {c} classes", self.labels[i]));
        }
        for i in 0..n {
            let expected = argmax_f32(self.logits.row(i));
            if self.predictions[i] != expected {
                return integrity(format!(
                    "row {i}: prediction {} but logits argmax is {expected}",
                    self.predictions[i]
                ));
            }
        }
        if let Some(head) = &self.head {
            if head.weight.rows() != c || head.weight.cols() != self.activations.cols() {
                return integrity(format!(
                    "head is {}x{}, expected {c}x{}",
                    head.weight.rows(),
                    head.weight.cols(),
                    self.activations.cols()
                ));
            }
            if head.bias.len() != c {
                return integrity(format!("head bias has {} entries, expected {c}", head.bias.len()));
            }
        }
        Ok(())
    }

    /// Serializes to the binary layout described in the module docs.
    pub fn to_bytes(&self) -> Result<Vec<u8>, BundleError> {
        self.validate()?;
        let (n, p, c) = (self.len(), self.width(), self.num_classes());
        let mut out = Vec::with_capacity(24 + 4 * (n * (p + c + 3)));
        out.extend_from_slice(BUNDLE_MAGIC);
        let flags = if self.bias_attributes.is_some() {
            FLAG_BIAS_ATTRIBUTES
        } else {
            0
        };
        for v in [BUNDLE_VERSION, to_u32(n)?, to_u32(p)?, to_u32(c)?, flags] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_f32s(&mut out, self.activations.as_slice());
        put_f32s(&mut out, self.logits.as_slice());
        put_u32s(&mut out, &self.labels)?;
        put_u32s(&mut out, &self.predictions)?;
        if let Some(b) = &self.bias_attributes {
            put_u32s(&mut out, b)?;
        }
        put_str(&mut out, &self.layer_name)?;
        put_str(&mut out, &self.model_id)?;
        if let Some(head) = &self.head {
            head.write_section(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BundleError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(BundleError::Format("bad magic, expected ABF1".into()));
        }
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(BundleError::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let p = r.u32()? as usize;
        let c = r.u32()? as usize;
        let flags = r.u32()?;
        if flags & !FLAG_BIAS_ATTRIBUTES != 0 {
            return Err(BundleError::Format(format!("unknown flags {flags:#x}")));
        }
        let activations = r.matrix(n, p)?;
        let logits = r.matrix(n, c)?;
        let labels = r.u32s(n)?;
        let predictions = r.u32s(n)?;
        let bias_attributes = if flags & FLAG_BIAS_ATTRIBUTES != 0 {
            Some(r.u32s(n)?)
        } else {
            None
        };
        let layer_name = r.string()?;
        let model_id = r.string()?;
        let head = if r.remaining() == 0 {
            None
        } else {
            let head = HeadParams::read_section(&mut r)?;
            if head.num_classes() != c || head.width() != p {
                return Err(BundleError::Integrity(format!(
                    "HEAD section is {}x{}, bundle is {c} classes x {p} features",
                    head.num_classes(),
                    head.width()
                )));
            }
            Some(head)
        };
        if r.remaining() != 0 {
            return Err(BundleError::Format(format!("{} trailing bytes", r.remaining())));
        }
        let bundle = Self {
            activations,
            logits,
            labels,
            predictions,
            bias_attributes,
            layer_name,
            model_id,
            head,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn write_bundle(bundle: &ActivationBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    let bytes = bundle.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<ActivationBundle, BundleError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    ActivationBundle::from_bytes(&bytes)
}

fn to_u32(v: usize) -> Result<u32, BundleError> {
    u32::try_from(v).map_err(|_| BundleError::Format(format!("{v} does not fit in u32")))
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_u32s(out: &mut Vec<u8>, values: &[usize]) -> Result<(), BundleError> {
    for &v in values {
        out.extend_from_slice(&to_u32(v)?.to_le_bytes());
    }
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), BundleError> {
    out.extend_from_slice(&to_u32(s.len())?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        if self.remaining() < n {
            return Err(BundleError::Format(format!(
                "truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, BundleError> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| BundleError::Format("size overflow".into()))?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>, BundleError> {
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix, BundleError> {
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| BundleError::Format("size overflow".into()))?;
        let values = self.f32s(count)?;
        Matrix::new(rows, cols, values).map_err(|e| BundleError::Format(e.to_string()))
    }

    fn string(&mut self) -> Result<String, BundleError> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|e| BundleError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_bundle() -> ActivationBundle {
        let activations =
            Matrix::from_rows(&[[0.0, 1.0, 2.0, 0.5], [3.0, 0.0, 0.25, 1.0], [0.0, 0.0, 0.0, 0.0]])
                .unwrap();
        let logits = Matrix::from_rows(&[[0.5, -1.0], [-2.0, 3.0], [1.0, 1.0]]).unwrap();
        ActivationBundle {
            activations,
            logits,
            labels: vec![0, 1, 1],
            predictions: vec![0, 1, 0],
            bias_attributes: Some(vec![1, 0, 1]),
            layer_name: "relu2".into(),
            model_id: "toy".into(),
            head: None,
        }
    }

    #[test]
    fn round_trip_and_stable_bytes() {
        let b = tiny_bundle();
        let bytes = b.to_bytes().unwrap();
        let back = ActivationBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn head_section_round_trips() {
        let mut b = tiny_bundle();
        b.head = Some(HeadParams {
            weight: Matrix::from_rows(&[[1.0, 0.0, -0.5, 2.0], [0.0, 1.0, 0.5, -2.0]]).unwrap(),
            bias: vec![0.25, -0.25],
        });
        let bytes = b.to_bytes().unwrap();
        let back = ActivationBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);

        // The companion file holds exactly the appended section.
        let head = b.head.as_ref().unwrap();
        let section = head.to_bytes().unwrap();
        assert!(bytes.ends_with(&section));
        assert_eq!(&HeadParams::from_bytes(&section).unwrap(), head);
        assert!(HeadParams::from_bytes(&section[..section.len() - 1]).is_err());
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = tiny_bundle().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            ActivationBundle::from_bytes(&bytes),
            Err(BundleError::Format(_))
        ));
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = tiny_bundle().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            ActivationBundle::from_bytes(&bytes),
            Err(BundleError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn prediction_mismatch_is_an_integrity_error() {
        let b = tiny_bundle();
        let mut bytes = b.to_bytes().unwrap();
        // predictions start after header, activations, logits, labels
        let offset = 24 + 4 * (3 * 4 + 3 * 2 + 3);
        bytes[offset..offset + 4].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(
            ActivationBundle::from_bytes(&bytes),
            Err(BundleError::Integrity(_))
        ));
    }

    #[test]
    fn truncated_and_trailing_bytes_fail() {
        let bytes = tiny_bundle().to_bytes().unwrap();
        assert!(ActivationBundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(b"junk");
        assert!(matches!(
            ActivationBundle::from_bytes(&extra),
            Err(BundleError::Format(_))
        ));
    }
}
