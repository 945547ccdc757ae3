//! The gradient probe: error sets, the one-step perturbed representation,
//! activity indicators, the FN/FP estimators and the per-concept bias score.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::{project, ConceptBank, ConceptError, ConceptId};
use crate::data::{ActivationBundle, Sample};
use crate::linalg::Matrix;
use crate::model::{argmax, ClassifierHead, FrozenClassifier, ModelError};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("bank belongs to class {bank} but error sets to class {errors}")]
    ClassMismatch { bank: usize, errors: usize },
    #[error("unknown sample id {0}")]
    UnknownSample(usize),
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Gradient step size.
    pub d: f64,
    /// A concept is active when its coefficient exceeds this.
    pub eps_active: f64,
    /// Bias threshold on the score.
    pub tau: f64,
    /// Which label the gradient step is taken against.
    pub step_label: StepLabel,
}

/// Target of the probe's loss gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepLabel {
    /// Each sample's own label: false negatives move toward `y`, false
    /// positives away from it.
    #[default]
    Own,
    /// The audited class for every sample, so false positives move further
    /// into `y`. Kept for comparison; it leaves confounders mostly unscored.
    Audited,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            d: 2e4,
            eps_active: 1e-8,
            tau: 0.55,
            step_label: StepLabel::Own,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(ProbeError::InvalidConfig("d must be positive".into()));
        }
        if !(self.eps_active >= 0.0 && self.eps_active.is_finite()) {
            return Err(ProbeError::InvalidConfig("eps_active must be non-negative".into()));
        }
        // Thresholds above 1 are allowed and simply flag nothing.
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(ProbeError::InvalidConfig("tau must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Audit-set representations with labels and predictions, from an in-process
/// model or from an activation bundle.
#[derive(Debug, Clone)]
pub struct AuditRepresentations {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// One row `a = g(x)` per sample.
    pub activations: Matrix,
    row_of: HashMap<usize, usize>,
}

impl AuditRepresentations {
    pub fn new(
        ids: Vec<usize>,
        labels: Vec<usize>,
        predictions: Vec<usize>,
        activations: Matrix,
    ) -> Result<Self, ProbeError> {
        let n = ids.len();
        if labels.len() != n || predictions.len() != n || activations.rows() != n {
            return Err(ProbeError::InvalidConfig(
                "ids, labels, predictions and activations must have equal length".into(),
            ));
        }
        let row_of: HashMap<usize, usize> = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        if row_of.len() != n {
            return Err(ProbeError::InvalidConfig("duplicate sample ids".into()));
        }
        Ok(Self {
            ids,
            labels,
            predictions,
            activations,
            row_of,
        })
    }

    pub fn from_model(model: &FrozenClassifier, audit: &[Sample]) -> Result<Self, ProbeError> {
        let activations = model.features_batch(&audit.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let predictions = (0..audit.len())
            .into_par_iter()
            .map(|i| Ok(argmax(&model.head_logits(activations.row(i))?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        Self::new(
            audit.iter().map(|s| s.id).collect(),
            audit.iter().map(|s| s.label).collect(),
            predictions,
            activations,
        )
    }

    /// Uses the row index as sample id.
    pub fn from_bundle(bundle: &ActivationBundle) -> Result<Self, ProbeError> {
        Self::new(
            (0..bundle.labels.len()).collect(),
            bundle.labels.clone(),
            bundle.predictions.clone(),
            bundle.activations.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn activation(&self, id: usize) -> Result<&[f64], ProbeError> {
        let row = *self.row_of.get(&id).ok_or(ProbeError::UnknownSample(id))?;
        Ok(self.activations.row(row))
    }

    pub fn label(&self, id: usize) -> Result<usize, ProbeError> {
        let row = *self.row_of.get(&id).ok_or(ProbeError::UnknownSample(id))?;
        Ok(self.labels[row])
    }
}

/// False negatives and false positives of one class, as sample ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorSets {
    pub class_id: usize,
    /// Labeled `y`, predicted otherwise.
    pub fn_samples: Vec<usize>,
    /// Predicted `y`, labeled otherwise.
    pub fp_samples: Vec<usize>,
}

/// Error sets from parallel label/prediction/id lists.
pub fn error_sets_from(labels: &[usize], predictions: &[usize], ids: &[usize], y: usize) -> ErrorSets {
    let mut sets = ErrorSets {
        class_id: y,
        fn_samples: Vec::new(),
        fp_samples: Vec::new(),
    };
    for ((&label, &pred), &id) in labels.iter().zip(predictions).zip(ids) {
        if label == y && pred != y {
            sets.fn_samples.push(id);
        } else if pred == y && label != y {
            sets.fp_samples.push(id);
        }
    }
    sets
}

/// `FN_y` and `FP_y` of `model` on `audit`.
pub fn collect_error_sets(model: &FrozenClassifier, audit: &[Sample], y: usize) -> Result<ErrorSets, ModelError> {
    let predictions = audit
        .par_iter()
        .map(|s| model.predict(&s.image))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = audit.iter().map(|s| s.label).collect();
    let ids: Vec<usize> = audit.iter().map(|s| s.id).collect();
    Ok(error_sets_from(&labels, &predictions, &ids, y))
}

/// `a' = max(0, a − d ∇_a L(h(a), y))`.
pub fn probe_step<H: ClassifierHead + ?Sized>(head: &H, a: &[f64], y: usize, d: f64) -> Result<Vec<f64>, ModelError> {
    let grad = head.gradient(a, y)?;
    Ok(a.iter().zip(&grad).map(|(ai, gi)| (ai - d * gi).max(0.0)).collect())
}

/// `I_k = u_k > eps`.
pub fn indicator(u: &[f64], eps_active: f64) -> Vec<bool> {
    u.iter().map(|&v| v > eps_active).collect()
}

/// Mean indicator changes of one class bank under the probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub class_id: usize,
    /// Mean over `FN_y` of `I(a') − I(a)`; absent when `FN_y` is empty.
    pub e_fn: Option<Vec<f64>>,
    /// Mean over `FP_y` of `I(a) − I(a')`; absent when `FP_y` is empty.
    pub e_fp: Option<Vec<f64>>,
    pub n_fn: usize,
    pub n_fp: usize,
}

/// Per-sample indicator change `I(a') − I(a)` on every concept.
fn indicator_changes<H: ClassifierHead + ?Sized>(
    head: &H,
    reps: &AuditRepresentations,
    bank: &ConceptBank,
    ids: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<Vec<i8>>, ProbeError> {
    ids.par_iter()
        .map(|&id| {
            let a = reps.activation(id)?;
            let target = match cfg.step_label {
                StepLabel::Audited => bank.class_id,
                StepLabel::Own => reps.label(id)?,
            };
            let a_prime = probe_step(head, a, target, cfg.d)?;
            let before = indicator(&project(&bank.concepts, a)?, cfg.eps_active);
            let after = indicator(&project(&bank.concepts, &a_prime)?, cfg.eps_active);
            Ok(after
                .iter()
                .zip(&before)
                .map(|(&x, &y)| x as i8 - y as i8)
                .collect())
        })
        .collect()
}

fn mean_changes(changes: &[Vec<i8>], r: usize, sign: f64) -> Option<Vec<f64>> {
    if changes.is_empty() {
        return None;
    }
    let mut acc = vec![0i64; r];
    for c in changes {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v as i64;
        }
    }
    Some(acc.iter().map(|&s| sign * s as f64 / changes.len() as f64).collect())
}

/// `E_FN` and `E_FP` of every concept of `bank`.
pub fn estimators<H: ClassifierHead + ?Sized>(
    head: &H,
    reps: &AuditRepresentations,
    bank: &ConceptBank,
    errs: &ErrorSets,
    cfg: &ProbeConfig,
) -> Result<Estimates, ProbeError> {
    if bank.class_id != errs.class_id {
        return Err(ProbeError::ClassMismatch {
            bank: bank.class_id,
            errors: errs.class_id,
        });
    }
    let r = bank.rank();
    let fn_changes = indicator_changes(head, reps, bank, &errs.fn_samples, cfg)?;
    let fp_changes = indicator_changes(head, reps, bank, &errs.fp_samples, cfg)?;
    Ok(Estimates {
        class_id: bank.class_id,
        e_fn: mean_changes(&fn_changes, r, 1.0),
        e_fp: mean_changes(&fp_changes, r, -1.0),
        n_fn: errs.fn_samples.len(),
        n_fp: errs.fp_samples.len(),
    })
}

/// Bias score of one concept: the average of both estimators, the single
/// present one when the other error set is empty, `None` when both are.
pub fn bias_score(e_fn: Option<f64>, e_fp: Option<f64>) -> Option<f64> {
    match (e_fn, e_fp) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    }
}

/// Scores for every concept of one estimate.
pub fn bias_scores(estimates: &Estimates, r: usize) -> Vec<Option<f64>> {
    (0..r)
        .map(|k| {
            bias_score(
                estimates.e_fn.as_ref().map(|v| v[k]),
                estimates.e_fp.as_ref().map(|v| v[k]),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub class: usize,
    pub concept: usize,
    pub e_fn: Option<f64>,
    pub e_fp: Option<f64>,
    pub n_fn: usize,
    pub n_fp: usize,
    /// `None` is UNSCORED.
    pub score: Option<f64>,
    pub is_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BiasScoreTable {
    pub rows: Vec<ScoreRow>,
}

pub const SCORE_CSV_HEADER: &str = "class,concept,e_fn,e_fp,n_fn,n_fp,score,is_bias";

impl BiasScoreTable {
    pub fn score(&self, class: usize, concept: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.class == class && r.concept == concept)
            .and_then(|r| r.score)
    }

    pub fn max_score(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.score).reduce(f64::max)
    }

    /// Concepts scoring strictly above `tau`.
    pub fn bias_concepts(&self) -> Vec<ConceptId> {
        self.rows
            .iter()
            .filter(|r| r.is_bias)
            .map(|r| ConceptId {
                class_id: r.class,
                index: r.concept,
            })
            .collect()
    }

    /// CSV with one row per concept; absent estimators are empty fields and
    /// unscored concepts carry `UNSCORED`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("{SCORE_CSV_HEADER}\n");
        for r in &self.rows {
            let score = r.score.map(|x| x.to_string()).unwrap_or_else(|| "UNSCORED".into());
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.class,
                r.concept,
                opt(r.e_fn),
                opt(r.e_fp),
                r.n_fn,
                r.n_fp,
                score,
                r.is_bias
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Result of the full identification pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Identification {
    pub table: BiasScoreTable,
    /// Per class, concept indices by descending score; unscored concepts last.
    pub ranked: Vec<(usize, Vec<usize>)>,
    pub error_sets: Vec<ErrorSets>,
}

impl Identification {
    /// `B`: every class concept with `S > tau`.
    pub fn bias_set(&self) -> Vec<ConceptId> {
        self.table.bias_concepts()
    }
}

/// Scores every concept of every bank on the audit representations.
pub fn identify<H: ClassifierHead + ?Sized>(
    head: &H,
    reps: &AuditRepresentations,
    banks: &[ConceptBank],
    cfg: &ProbeConfig,
) -> Result<Identification, ProbeError> {
    cfg.validate()?;
    let mut table = BiasScoreTable::default();
    let mut ranked = Vec::with_capacity(banks.len());
    let mut error_sets = Vec::with_capacity(banks.len());
    for bank in banks {
        let y = bank.class_id;
        let errs = error_sets_from(&reps.labels, &reps.predictions, &reps.ids, y);
        let est = estimators(head, reps, bank, &errs, cfg)?;
        let scores = bias_scores(&est, bank.rank());
        for (k, &score) in scores.iter().enumerate() {
            table.rows.push(ScoreRow {
                class: y,
                concept: k,
                e_fn: est.e_fn.as_ref().map(|v| v[k]),
                e_fp: est.e_fp.as_ref().map(|v| v[k]),
                n_fn: est.n_fn,
                n_fp: est.n_fp,
                score,
                is_bias: score.is_some_and(|s| s > cfg.tau),
            });
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| {
            let key = |s: Option<f64>| s.unwrap_or(f64::NEG_INFINITY);
            key(scores[j]).total_cmp(&key(scores[i]))
        });
        ranked.push((y, order));
        error_sets.push(errs);
    }
    Ok(Identification {
        table,
        ranked,
        error_sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::HeadParams;

    fn head(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> HeadParams {
        HeadParams {
            weight: Matrix::from_rows(&weight).unwrap(),
            bias,
        }
    }

    #[test]
    fn zero_step_and_zero_head_are_identity() {
        let h = head(vec![vec![1.0, -2.0], vec![0.5, 0.5]], vec![0.0, 0.1]);
        let a = [0.3, 1.2];
        assert_eq!(probe_step(&h, &a, 1, 0.0).unwrap(), a.to_vec());
        let z = head(vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![1.0, 0.0]);
        assert_eq!(probe_step(&z, &a, 0, 1e6).unwrap(), a.to_vec());
    }

    #[test]
    fn large_step_clamps_to_exact_zero() {
        let h = head(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        // Label 1 pushes coordinate 0 down.
        let a = [1.0, 1.0];
        let g = h.gradient(&a, 1).unwrap();
        assert!(g[0] > 0.0);
        let out = probe_step(&h, &a, 1, 2.0 / g[0]).unwrap();
        assert_eq!(out[0], 0.0);
        assert!(out[1] > 1.0);
    }

    #[test]
    fn indicator_threshold() {
        assert_eq!(indicator(&[0.0, 0.0], 1e-8), vec![false, false]);
        assert_eq!(indicator(&[1e-12, 1.0], 1e-8), vec![false, true]);
    }

    #[test]
    fn score_rules() {
        assert_eq!(bias_score(Some(1.0), Some(1.0)), Some(1.0));
        assert_eq!(bias_score(Some(0.6), None), Some(0.6));
        assert!((bias_score(Some(0.8), Some(0.4)).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(bias_score(None, None), None);
    }

    #[test]
    fn error_set_definitions() {
        let sets = error_sets_from(&[0, 1, 2, 0], &[0, 2, 2, 1], &[10, 11, 12, 13], 1);
        assert_eq!(sets.fn_samples, vec![11]);
        assert_eq!(sets.fp_samples, vec![13]);
        let z = error_sets_from(&[0, 1, 2, 0], &[0, 2, 2, 1], &[10, 11, 12, 13], 2);
        assert_eq!(z.fn_samples, Vec::<usize>::new());
        assert_eq!(z.fp_samples, vec![11]);
    }

    #[test]
    fn hand_counted_flips_average_out() {
        assert_eq!(mean_changes(&[vec![1], vec![0], vec![-1]], 1, 1.0), Some(vec![0.0]));
        assert_eq!(mean_changes(&[vec![1, 0], vec![1, 0]], 2, 1.0), Some(vec![1.0, 0.0]));
        assert_eq!(mean_changes(&[], 2, 1.0), None);
    }

    #[test]
    fn csv_marks_unscored() {
        let t = BiasScoreTable {
            rows: vec![ScoreRow {
                class: 0,
                concept: 1,
                e_fn: None,
                e_fp: None,
                n_fn: 0,
                n_fp: 0,
                score: None,
                is_bias: false,
            }],
        };
        assert_eq!(t.to_csv(), format!("{SCORE_CSV_HEADER}\n0,1,,,0,0,UNSCORED,false\n"));
    }
}
