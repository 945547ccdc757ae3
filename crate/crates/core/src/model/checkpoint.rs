//! `MLP1` checkpoints: u32 layer count, then per layer u32 rows (outputs),
//! u32 cols (inputs), row-major f32 weights and f32 biases, all little-endian.
//! The last layer is the head; every earlier layer is followed by ReLU.

use std::fs;
use std::path::Path;

use super::{Dense, FrozenClassifier, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLP1";

pub fn checkpoint_bytes(model: &FrozenClassifier) -> Vec<u8> {
    let layers: Vec<&Dense> = model
        .feature_layers()
        .iter()
        .chain(std::iter::once(model.head_layer()))
        .collect();
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend((layers.len() as u32).to_le_bytes());
    for layer in layers {
        out.extend((layer.fan_out() as u32).to_le_bytes());
        out.extend((layer.fan_in() as u32).to_le_bytes());
        for v in layer.output_major_weight() {
            out.extend(v.to_le_bytes());
        }
        for v in layer.bias() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &FrozenClassifier, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ModelError> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| ModelError::Format("layer too large".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<FrozenClassifier, ModelError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Format("bad magic, expected MLP1".into()));
    }
    let count = cur.u32()?;
    if count < 2 {
        return Err(ModelError::Format(format!("{count} layers, need at least 2")));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = cur.u32()?;
        let cols = cur.u32()?;
        let w = cur.f32s(rows.saturating_mul(cols))?;
        let b = cur.f32s(rows)?;
        layers.push(Dense::from_output_major(cols, rows, &w, b)?);
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::Format("trailing bytes after last layer".into()));
    }
    let head = layers.pop().expect("count >= 2");
    FrozenClassifier::from_layers(layers, head)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FrozenClassifier, ModelError> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::random_model;

    #[test]
    fn round_trip_is_exact() {
        let m = random_model(12, 5, 3, 4);
        let bytes = checkpoint_bytes(&m);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint_bytes(&back), bytes);
        // magic + count + 2 × (rows, cols) + params
        assert_eq!(bytes.len(), 8 + 16 + 4 * (12 * 5 + 5 + 5 * 3 + 3));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = checkpoint_bytes(&random_model(4, 3, 2, 0));
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(ModelError::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(checkpoint_from_bytes(&extra).is_err());
    }
}
