//! Bank files and patch galleries.
//!
//! `CBK1` (little-endian): u32 class_id | u32 p | u32 r | f32 W column-major |
//! per concept u32 ref count + refs (u32 sample id, u32 row, u32 col,
//! f32 coefficient) | f64 NMF objective | u64 seed | u32 patch size | u32 stride.
//!
//! `CBM1`: u32 p | u32 m | f32 W column-major | per concept u8 bias flag,
//! u32 member count, members (u32 class, u32 index) | u32 dropped count +
//! dropped (u32 class, u32 index).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{ConceptBank, ConceptError, ConceptId, MergedBank, PatchOrigin, PatchRef};
use crate::data::{crop_resize, export::write_ppm, Sample};
use crate::linalg::Matrix;

pub const BANK_MAGIC: &[u8; 4] = b"CBK1";
pub const MERGED_MAGIC: &[u8; 4] = b"CBM1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn put_columns(out: &mut Vec<u8>, m: &Matrix) {
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            out.extend((m.get(i, j) as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ConceptError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ConceptError::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ConceptError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f64, ConceptError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }

    fn columns(&mut self, rows: usize, cols: usize) -> Result<Matrix, ConceptError> {
        let mut m = Matrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                let v = self.f32()?;
                if !(v.is_finite() && v >= 0.0) {
                    return Err(ConceptError::Format("concept entries must be finite and non-negative".into()));
                }
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<(), ConceptError> {
        if self.take(4)? != magic {
            return Err(ConceptError::Format(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), ConceptError> {
        if self.pos != self.bytes.len() {
            return Err(ConceptError::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

pub fn bank_to_bytes(bank: &ConceptBank) -> Vec<u8> {
    let mut out = BANK_MAGIC.to_vec();
    put_u32(&mut out, bank.class_id);
    put_u32(&mut out, bank.width());
    put_u32(&mut out, bank.rank());
    put_columns(&mut out, &bank.concepts);
    for refs in &bank.patch_refs {
        put_u32(&mut out, refs.len());
        for r in refs {
            put_u32(&mut out, r.origin.sample_id);
            put_u32(&mut out, r.origin.row);
            put_u32(&mut out, r.origin.col);
            out.extend((r.coefficient as f32).to_le_bytes());
        }
    }
    out.extend(bank.nmf_objective.to_le_bytes());
    out.extend(bank.seed.to_le_bytes());
    put_u32(&mut out, bank.patch_size);
    put_u32(&mut out, bank.stride);
    out
}

pub fn bank_from_bytes(bytes: &[u8]) -> Result<ConceptBank, ConceptError> {
    let mut rd = Reader { bytes, pos: 0 };
    rd.magic(BANK_MAGIC)?;
    let class_id = rd.u32()?;
    let p = rd.u32()?;
    let r = rd.u32()?;
    let concepts = rd.columns(p, r)?;
    let mut patch_refs = Vec::with_capacity(r);
    for _ in 0..r {
        let count = rd.u32()?;
        let mut refs = Vec::with_capacity(count.min(bytes.len() / 16));
        for _ in 0..count {
            let origin = PatchOrigin {
                sample_id: rd.u32()?,
                row: rd.u32()?,
                col: rd.u32()?,
            };
            refs.push(PatchRef {
                origin,
                coefficient: rd.f32()?,
            });
        }
        patch_refs.push(refs);
    }
    let nmf_objective = f64::from_le_bytes(rd.take(8)?.try_into().expect("8 bytes"));
    let seed = u64::from_le_bytes(rd.take(8)?.try_into().expect("8 bytes"));
    let patch_size = rd.u32()?;
    let stride = rd.u32()?;
    rd.finish()?;
    Ok(ConceptBank {
        class_id,
        concepts,
        patch_refs,
        nmf_objective,
        seed,
        patch_size,
        stride,
    })
}

pub fn write_bank(bank: &ConceptBank, path: impl AsRef<Path>) -> Result<(), ConceptError> {
    fs::write(path, bank_to_bytes(bank))?;
    Ok(())
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<ConceptBank, ConceptError> {
    bank_from_bytes(&fs::read(path)?)
}

pub fn merged_to_bytes(merged: &MergedBank) -> Vec<u8> {
    let mut out = MERGED_MAGIC.to_vec();
    put_u32(&mut out, merged.concepts.rows());
    put_u32(&mut out, merged.len());
    put_columns(&mut out, &merged.concepts);
    for (members, &flag) in merged.clusters.iter().zip(&merged.bias_flags) {
        out.push(u8::from(flag));
        put_u32(&mut out, members.len());
        for id in members {
            put_u32(&mut out, id.class_id);
            put_u32(&mut out, id.index);
        }
    }
    put_u32(&mut out, merged.dropped.len());
    for id in &merged.dropped {
        put_u32(&mut out, id.class_id);
        put_u32(&mut out, id.index);
    }
    out
}

pub fn merged_from_bytes(bytes: &[u8]) -> Result<MergedBank, ConceptError> {
    let mut rd = Reader { bytes, pos: 0 };
    rd.magic(MERGED_MAGIC)?;
    let p = rd.u32()?;
    let m = rd.u32()?;
    let concepts = rd.columns(p, m)?;
    let ids = |rd: &mut Reader, n: usize| -> Result<Vec<ConceptId>, ConceptError> {
        (0..n)
            .map(|_| {
                Ok(ConceptId {
                    class_id: rd.u32()?,
                    index: rd.u32()?,
                })
            })
            .collect()
    };
    let mut clusters = Vec::with_capacity(m);
    let mut bias_flags = Vec::with_capacity(m);
    for _ in 0..m {
        bias_flags.push(match rd.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(ConceptError::Format(format!("bad bias flag {b}"))),
        });
        let n = rd.u32()?;
        clusters.push(ids(&mut rd, n)?);
    }
    let n = rd.u32()?;
    let dropped = ids(&mut rd, n)?;
    rd.finish()?;
    Ok(MergedBank {
        concepts,
        clusters,
        bias_flags,
        dropped,
    })
}

pub fn write_merged(merged: &MergedBank, path: impl AsRef<Path>) -> Result<(), ConceptError> {
    fs::write(path, merged_to_bytes(merged))?;
    Ok(())
}

pub fn read_merged(path: impl AsRef<Path>) -> Result<MergedBank, ConceptError> {
    merged_from_bytes(&fs::read(path)?)
}

/// Writes the `top_k` patches of every concept as `concept{k}_rank{i}.ppm`,
/// re-cropped from `audit`, with `comment` in each header. Returns the number
/// of files written.
pub fn write_gallery(
    bank: &ConceptBank,
    audit: &[Sample],
    dir: impl AsRef<Path>,
    top_k: usize,
    comment: Option<&str>,
) -> Result<usize, ConceptError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let by_id: HashMap<usize, &Sample> = audit.iter().map(|s| (s.id, s)).collect();
    let mut written = 0;
    for (k, refs) in bank.patch_refs.iter().enumerate() {
        for (i, r) in refs.iter().take(top_k).enumerate() {
            let sample = by_id.get(&r.origin.sample_id).ok_or_else(|| {
                ConceptError::Format(format!("patch refers to unknown sample {}", r.origin.sample_id))
            })?;
            let patch = crop_resize(&sample.image, r.origin.row, r.origin.col, bank.patch_size);
            write_ppm(&patch, dir.join(format!("concept{k}_rank{i}.ppm")), comment)?;
            written += 1;
        }
    }
    Ok(written)
}
