//! Dense linear algebra: NNLS, alternating-NNLS NMF, cosine similarity.

mod matrix;
mod nmf;
mod nnls;

pub use matrix::{dot, norm2, Matrix};
pub use nmf::{nmf, objective as nmf_objective, NmfConfig, NmfResult};
pub use nnls::{nnls, nnls_gram, nnls_gram_warm, NnlsProjector};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("input contains NaN or infinite values")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix has negative entries")]
    NegativeInput,
    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("zero-length vector has no direction")]
    ZeroVector,
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, LinalgError> {
    if u.len() != v.len() {
        return Err(LinalgError::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (nu, nv) = (norm2(u), norm2(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(LinalgError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}
