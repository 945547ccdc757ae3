//! Class-conditional concept banks from patch activations, coefficient
//! projection, and the model-wide merged bank.

mod io;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::{crop_resize, default_stride, patch_grid, DataError, Sample};
use crate::linalg::{cosine_similarity, nmf, nnls, norm2, LinalgError, Matrix, NmfConfig};
use crate::model::{FrozenClassifier, ModelError};
use crate::probe::BiasScoreTable;

pub use io::{
    bank_from_bytes, bank_to_bytes, merged_from_bytes, merged_to_bytes, read_bank, read_merged,
    write_bank, write_gallery, write_merged, BANK_MAGIC, MERGED_MAGIC,
};

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("no audit sample is predicted as class {0}")]
    NoPredictedSamples(usize),
    #[error("incompatible representation width: expected {expected}, found {found}")]
    IncompatibleWidth { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad bank file: {0}")]
    Format(String),
}

/// Default number of ranked patches kept per concept.
pub const TOP_PATCHES: usize = 100;

/// How patches are cut from audit images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchConfig {
    pub size: usize,
    /// `None` selects [`default_stride`].
    pub stride: Option<usize>,
    /// Maximum number of patches per class; larger sets are subsampled.
    pub cap: usize,
    pub seed: u64,
}

impl PatchConfig {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            size,
            stride: None,
            cap: 5000,
            seed,
        }
    }

    pub fn effective_stride(&self) -> usize {
        self.stride.unwrap_or_else(|| default_stride(self.size))
    }
}

/// Where a patch came from: sample id and the window's top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchOrigin {
    pub sample_id: usize,
    pub row: usize,
    pub col: usize,
}

/// A ranked patch with its coefficient on one concept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchRef {
    pub origin: PatchOrigin,
    pub coefficient: f64,
}

/// Stacked patch activations `A_y` with one origin per row.
#[derive(Debug, Clone)]
pub struct ClassActivations {
    pub class_id: usize,
    pub activations: Matrix,
    pub origins: Vec<PatchOrigin>,
}

/// Predictions of `model` on every sample, in order.
pub fn predict_all(model: &FrozenClassifier, samples: &[Sample]) -> Result<Vec<usize>, ModelError> {
    samples.par_iter().map(|s| model.predict(&s.image)).collect()
}

/// `A_y`: activations of every patch of every audit sample predicted as `y`.
pub fn collect_class_activations(
    model: &FrozenClassifier,
    audit: &[Sample],
    y: usize,
    patches: &PatchConfig,
) -> Result<ClassActivations, ConceptError> {
    let predictions = predict_all(model, audit)?;
    collect_with_predictions(model, audit, &predictions, y, patches)
}

/// As [`collect_class_activations`] with predictions computed beforehand.
pub fn collect_with_predictions(
    model: &FrozenClassifier,
    audit: &[Sample],
    predictions: &[usize],
    y: usize,
    patches: &PatchConfig,
) -> Result<ClassActivations, ConceptError> {
    if predictions.len() != audit.len() {
        return Err(ConceptError::InvalidConfig(format!(
            "{} predictions for {} samples",
            predictions.len(),
            audit.len()
        )));
    }
    if patches.cap == 0 {
        return Err(ConceptError::InvalidConfig("patch cap must be positive".into()));
    }
    let selected: Vec<&Sample> = audit
        .iter()
        .zip(predictions)
        .filter(|(_, &p)| p == y)
        .map(|(s, _)| s)
        .collect();
    let Some(first) = selected.first() else {
        return Err(ConceptError::NoPredictedSamples(y));
    };
    let (h, w) = (first.image.height, first.image.width);
    let stride = patches.effective_stride();
    if patches.size == 0 || patches.size > h.min(w) {
        return Err(DataError::PatchTooLarge {
            size: patches.size,
            height: h,
            width: w,
        }
        .into());
    }
    let grid = patch_grid(h, w, patches.size, stride);

    let mut jobs: Vec<(&Sample, usize, usize)> = selected
        .iter()
        .flat_map(|s| grid.iter().map(move |&(r, c)| (*s, r, c)))
        .collect();
    if jobs.len() > patches.cap {
        let mut rng = ChaCha8Rng::seed_from_u64(patches.seed ^ (y as u64).wrapping_mul(0x9E37_79B9));
        let mut keep = index::sample(&mut rng, jobs.len(), patches.cap).into_vec();
        keep.sort_unstable();
        jobs = keep.into_iter().map(|i| jobs[i]).collect();
    }

    let rows: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(s, r, c)| model.features(&crop_resize(&s.image, r, c, patches.size)))
        .collect::<Result<_, _>>()?;
    Ok(ClassActivations {
        class_id: y,
        activations: Matrix::from_rows(&rows)?,
        origins: jobs
            .iter()
            .map(|&(s, row, col)| PatchOrigin {
                sample_id: s.id,
                row,
                col,
            })
            .collect(),
    })
}

/// A class-conditional concept bank `W_y` (`p × r`) with patch provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    pub class_id: usize,
    pub concepts: Matrix,
    /// Per concept, patches by descending coefficient.
    pub patch_refs: Vec<Vec<PatchRef>>,
    pub nmf_objective: f64,
    pub seed: u64,
    pub patch_size: usize,
    pub stride: usize,
}

impl ConceptBank {
    pub fn width(&self) -> usize {
        self.concepts.rows()
    }

    pub fn rank(&self) -> usize {
        self.concepts.cols()
    }

    pub fn project(&self, a: &[f64]) -> Result<Vec<f64>, ConceptError> {
        project(&self.concepts, a)
    }
}

/// Fits `A_y ≈ U_y W_yᵀ` and keeps the `top_k` patches of every concept.
pub fn fit_class_bank(
    acts: &ClassActivations,
    rank: usize,
    seed: u64,
    patches: &PatchConfig,
    top_k: usize,
) -> Result<ConceptBank, ConceptError> {
    let result = nmf(&acts.activations, &NmfConfig::new(rank, seed))?;
    let u = &result.coefficients;
    let patch_refs = (0..rank)
        .map(|k| {
            let mut order: Vec<usize> = (0..u.rows()).collect();
            // Stable sort keeps row order among equal coefficients.
            order.sort_by(|&i, &j| u.get(j, k).total_cmp(&u.get(i, k)));
            order
                .into_iter()
                .take(top_k)
                .map(|i| PatchRef {
                    origin: acts.origins[i],
                    coefficient: u.get(i, k),
                })
                .collect()
        })
        .collect();
    Ok(ConceptBank {
        class_id: acts.class_id,
        nmf_objective: result.objective(),
        concepts: result.concepts,
        patch_refs,
        seed,
        patch_size: patches.size,
        stride: patches.effective_stride(),
    })
}

/// Concept coefficients of `a`: `argmin_{u ≥ 0} ‖W u − a‖²`.
pub fn project(concepts: &Matrix, a: &[f64]) -> Result<Vec<f64>, ConceptError> {
    if a.len() != concepts.rows() {
        return Err(ConceptError::IncompatibleWidth {
            expected: concepts.rows(),
            found: a.len(),
        });
    }
    Ok(nnls(concepts, a)?)
}

/// Identifies one concept of one class bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ConceptId {
    pub class_id: usize,
    pub index: usize,
}

/// The model-wide bank `W_merged` (`p × m`).
#[derive(Debug, Clone, PartialEq)]
pub struct MergedBank {
    pub concepts: Matrix,
    /// Members of every merged concept, sorted.
    pub clusters: Vec<Vec<ConceptId>>,
    pub bias_flags: Vec<bool>,
    /// All-zero input concepts, excluded from clustering.
    pub dropped: Vec<ConceptId>,
}

impl MergedBank {
    pub fn len(&self) -> usize {
        self.concepts.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices of merged concepts flagged as biased.
    pub fn bias_set(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.bias_flags[k]).collect()
    }
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so labels do not depend on union order.
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Mean of the unit-normalized members, rescaled to the mean member norm.
fn representative(members: &[usize], vectors: &[Vec<f64>], norms: &[f64]) -> Vec<f64> {
    let p = vectors[members[0]].len();
    let mut rep = vec![0.0; p];
    for &m in members {
        for (r, v) in rep.iter_mut().zip(&vectors[m]) {
            *r += v / norms[m];
        }
    }
    let mean_norm = members.iter().map(|&m| norms[m]).sum::<f64>() / members.len() as f64;
    let len = norm2(&rep);
    if len > 0.0 {
        rep.iter_mut().for_each(|r| *r *= mean_norm / len);
    }
    rep
}

/// Single-linkage clustering of all class concepts on the graph with an edge
/// wherever cosine similarity exceeds `cos_threshold`.
///
/// Representatives are re-clustered until no two of them exceed the threshold,
/// so the output never contains two near-duplicate concepts. A merged concept
/// is flagged when any member scored above `tau`.
pub fn merge_banks(
    banks: &[ConceptBank],
    cos_threshold: f64,
    scores: Option<&BiasScoreTable>,
    tau: f64,
) -> Result<MergedBank, ConceptError> {
    let Some(first) = banks.first() else {
        return Err(ConceptError::InvalidConfig("no banks to merge".into()));
    };
    let p = first.width();
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    let mut dropped = Vec::new();
    for bank in banks {
        if bank.width() != p {
            return Err(ConceptError::IncompatibleWidth {
                expected: p,
                found: bank.width(),
            });
        }
        for k in 0..bank.rank() {
            let id = ConceptId {
                class_id: bank.class_id,
                index: k,
            };
            let v = bank.concepts.column(k);
            if norm2(&v) > 0.0 {
                ids.push(id);
                vectors.push(v);
            } else {
                dropped.push(id);
            }
        }
    }
    let norms: Vec<f64> = vectors.iter().map(|v| norm2(v)).collect();

    let mut clusters: Vec<Vec<usize>> = (0..vectors.len()).map(|i| vec![i]).collect();
    loop {
        let reps: Vec<Vec<f64>> = clusters
            .iter()
            .map(|c| representative(c, &vectors, &norms))
            .collect();
        let mut sets = DisjointSet((0..reps.len()).collect());
        let mut merged_any = false;
        for i in 0..reps.len() {
            for j in i + 1..reps.len() {
                if cosine_similarity(&reps[i], &reps[j])? > cos_threshold {
                    sets.union(i, j);
                    merged_any = true;
                }
            }
        }
        if !merged_any {
            break;
        }
        let mut grouped: Vec<Vec<usize>> = vec![Vec::new(); reps.len()];
        for (i, cluster) in clusters.iter().enumerate() {
            grouped[sets.find(i)].extend(cluster);
        }
        clusters = grouped.into_iter().filter(|g| !g.is_empty()).collect();
        clusters.iter_mut().for_each(|c| c.sort_unstable());
        clusters.sort_by_key(|c| c[0]);
    }

    let columns: Vec<Vec<f64>> = clusters
        .iter()
        .map(|c| representative(c, &vectors, &norms))
        .collect();
    let bias_flags = clusters
        .iter()
        .map(|c| {
            c.iter().any(|&i| {
                scores
                    .and_then(|t| t.score(ids[i].class_id, ids[i].index))
                    .is_some_and(|s| s > tau)
            })
        })
        .collect();
    Ok(MergedBank {
        concepts: if columns.is_empty() {
            Matrix::zeros(p, 0)
        } else {
            Matrix::from_columns(&columns)?
        },
        clusters: clusters
            .into_iter()
            .map(|c| c.into_iter().map(|i| ids[i]).collect())
            .collect(),
        bias_flags,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(class_id: usize, columns: &[Vec<f64>]) -> ConceptBank {
        ConceptBank {
            class_id,
            concepts: Matrix::from_columns(columns).unwrap(),
            patch_refs: vec![Vec::new(); columns.len()],
            nmf_objective: 0.0,
            seed: 0,
            patch_size: 6,
            stride: 3,
        }
    }

    #[test]
    fn identical_banks_pair_up() {
        let cols = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.2, 1.0]];
        let merged = merge_banks(&[bank(0, &cols), bank(1, &cols)], 0.95, None, 0.55).unwrap();
        assert_eq!(merged.len(), 3);
        assert!(merged.clusters.iter().all(|c| c.len() == 2));
        assert!(merged.bias_flags.iter().all(|f| !f));
    }

    #[test]
    fn dissimilar_concepts_stay_apart() {
        let merged = merge_banks(
            &[
                bank(0, &[vec![1.0, 0.0], vec![0.0, 1.0]]),
                bank(1, &[vec![1.0, 1.0]]),
            ],
            0.95,
            None,
            0.55,
        )
        .unwrap();
        assert_eq!(merged.len(), 3);
        assert!(merged.clusters.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn single_linkage_chains() {
        // cos(1,2) ≈ 0.97, cos(2,3) ≈ 0.96, cos(1,3) ≈ 0.87
        let angle = |t: f64| vec![t.cos(), t.sin()];
        let (a, b) = (0.97f64.acos(), 0.96f64.acos());
        let v = [angle(0.0), angle(a), angle(a + b)];
        assert!(cosine_similarity(&v[0], &v[2]).unwrap() < 0.95);
        let merged = merge_banks(&[bank(0, &v[..])], 0.95, None, 0.55).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged.clusters[0].len(), 3);
    }

    #[test]
    fn representative_keeps_mean_norm() {
        let merged = merge_banks(
            &[bank(0, &[vec![2.0, 0.0]]), bank(1, &[vec![4.0, 0.0]])],
            0.95,
            None,
            0.55,
        )
        .unwrap();
        assert_eq!(merged.len(), 1);
        assert!((norm2(&merged.concepts.column(0)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dead_concepts_are_dropped() {
        let merged = merge_banks(&[bank(2, &[vec![0.0, 0.0], vec![1.0, 0.0]])], 0.95, None, 0.55).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged.dropped, vec![ConceptId { class_id: 2, index: 0 }]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let r = merge_banks(&[bank(0, &[vec![1.0]]), bank(1, &[vec![1.0, 0.0]])], 0.95, None, 0.55);
        assert!(matches!(r, Err(ConceptError::IncompatibleWidth { .. })));
    }

    #[test]
    fn projection_recovers_near_orthogonal_concept() {
        let w = Matrix::from_columns(&[
            vec![1.0, 0.01, 0.0],
            vec![0.0, 1.0, 0.02],
            vec![0.01, 0.0, 1.0],
        ])
        .unwrap();
        for k in 0..3 {
            let u = project(&w, &w.column(k)).unwrap();
            for (j, &v) in u.iter().enumerate() {
                assert!((v - f64::from(j == k)).abs() < 1e-6);
            }
        }
        assert_eq!(project(&w, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }
}
