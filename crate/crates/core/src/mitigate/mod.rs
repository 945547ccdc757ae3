//! Inference-time concept suppression, the random-ablation control and
//! group-wise evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::concepts::{project, ConceptError, MergedBank};
use crate::data::Sample;
use crate::linalg::norm2;
use crate::model::{argmax, FrozenClassifier, ModelError};

#[derive(Debug, Error)]
pub enum MitigateError {
    #[error("cannot pick {count} of {available} concepts")]
    CountTooLarge { count: usize, available: usize },
    #[error("merged concept {index} out of range 0..{len}")]
    UnknownConcept { index: usize, len: usize },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("sample {0} has no bias color")]
    MissingBiasColor(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
}

/// Below this residual norm the suppressed vector is returned unscaled.
pub const RESIDUAL_FLOOR: f64 = 1e-12;

/// Removes the components of `a` along the merged concepts in `bias`, then
/// rescales to the original norm. The result may have negative entries.
pub fn suppress(a: &[f64], merged: &MergedBank, bias: &[usize]) -> Result<Vec<f64>, MitigateError> {
    check_bias_set(merged, bias)?;
    if bias.is_empty() {
        return Ok(a.to_vec());
    }
    let u = project(&merged.concepts, a)?;
    suppress_with_coefficients(a, &u, merged, bias)
}

fn check_bias_set(merged: &MergedBank, bias: &[usize]) -> Result<(), MitigateError> {
    match bias.iter().find(|&&k| k >= merged.len()) {
        Some(&index) => Err(MitigateError::UnknownConcept {
            index,
            len: merged.len(),
        }),
        None => Ok(()),
    }
}

/// [`suppress`] with merged-bank coefficients `u` of `a` already computed, so
/// one projection serves several bias sets.
pub fn suppress_with_coefficients(
    a: &[f64],
    u: &[f64],
    merged: &MergedBank,
    bias: &[usize],
) -> Result<Vec<f64>, MitigateError> {
    check_bias_set(merged, bias)?;
    if bias.is_empty() {
        return Ok(a.to_vec());
    }
    let mut out = a.to_vec();
    for &k in bias {
        if u[k] != 0.0 {
            for (i, o) in out.iter_mut().enumerate() {
                *o -= u[k] * merged.concepts.get(i, k);
            }
        }
    }
    let residual = norm2(&out);
    if residual > RESIDUAL_FLOOR {
        let scale = norm2(a) / residual;
        out.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(out)
}

/// Prediction of the head on the suppressed representation of `a`.
pub fn classify_representation(
    model: &FrozenClassifier,
    merged: &MergedBank,
    bias: &[usize],
    a: &[f64],
) -> Result<usize, MitigateError> {
    Ok(argmax(&model.head_logits(&suppress(a, merged, bias)?)?))
}

pub fn classify_suppressed(
    model: &FrozenClassifier,
    merged: &MergedBank,
    bias: &[usize],
    sample: &Sample,
) -> Result<usize, MitigateError> {
    classify_representation(model, merged, bias, &model.features(&sample.image)?)
}

/// `count` distinct merged concepts drawn uniformly, sorted.
pub fn random_ablation_set(merged_len: usize, count: usize, seed: u64) -> Result<Vec<usize>, MitigateError> {
    if count > merged_len {
        return Err(MitigateError::CountTooLarge {
            count,
            available: merged_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = index::sample(&mut rng, merged_len, count).into_vec();
    set.sort_unstable();
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct GroupKey {
    pub label: usize,
    /// Whether the sample carries its class's biased color.
    pub bias_aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStat {
    pub label: usize,
    pub bias_aligned: bool,
    pub n: usize,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub worst_class_acc: f64,
    pub worst_group_acc: f64,
    pub per_group: Vec<GroupStat>,
}

impl EvalReport {
    /// CSV mirror: one `overall` row, then one row per group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,label,bias_aligned,n,acc\n");
        let n: usize = self.per_group.iter().map(|g| g.n).sum();
        writeln!(out, "overall,,,{n},{}", self.accuracy).expect("writing to a String");
        writeln!(out, "worst_class,,,,{}", self.worst_class_acc).expect("writing to a String");
        writeln!(out, "worst_group,,,,{}", self.worst_group_acc).expect("writing to a String");
        for g in &self.per_group {
            writeln!(out, "group,{},{},{},{}", g.label, g.bias_aligned, g.n, g.acc)
                .expect("writing to a String");
        }
        out
    }
}

/// Metrics of precomputed `predictions` on `test`.
pub fn evaluate_predictions(test: &[Sample], predictions: &[usize]) -> Result<EvalReport, MitigateError> {
    if test.is_empty() {
        return Err(MitigateError::EmptyTestSet);
    }
    assert_eq!(test.len(), predictions.len(), "one prediction per sample");
    let mut groups: BTreeMap<GroupKey, (usize, usize)> = BTreeMap::new();
    let mut classes: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (s, &pred) in test.iter().zip(predictions) {
        let color = s.bias_color.ok_or(MitigateError::MissingBiasColor(s.id))?;
        let hit = usize::from(pred == s.label);
        correct += hit;
        let key = GroupKey {
            label: s.label,
            bias_aligned: color == s.label,
        };
        let g = groups.entry(key).or_default();
        g.0 += 1;
        g.1 += hit;
        let c = classes.entry(s.label).or_default();
        c.0 += 1;
        c.1 += hit;
    }
    fn rate((n, k): (usize, usize)) -> f64 {
        k as f64 / n as f64
    }
    fn min_rate<K>(m: &BTreeMap<K, (usize, usize)>) -> f64 {
        m.values().map(|&v| rate(v)).fold(f64::INFINITY, f64::min)
    }
    Ok(EvalReport {
        accuracy: correct as f64 / test.len() as f64,
        worst_class_acc: min_rate(&classes),
        worst_group_acc: min_rate(&groups),
        per_group: groups
            .iter()
            .map(|(k, &v)| GroupStat {
                label: k.label,
                bias_aligned: k.bias_aligned,
                n: v.0,
                acc: rate(v),
            })
            .collect(),
    })
}

/// Evaluates an arbitrary classifier on `test`.
pub fn evaluate<F>(classify: F, test: &[Sample]) -> Result<EvalReport, MitigateError>
where
    F: Fn(&Sample) -> Result<usize, MitigateError> + Sync,
{
    let predictions = test.par_iter().map(&classify).collect::<Result<Vec<_>, _>>()?;
    evaluate_predictions(test, &predictions)
}
