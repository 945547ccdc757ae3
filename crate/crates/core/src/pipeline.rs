//! The audit stages chained end to end on in-memory data: concept banks,
//! scoring and merging, suppression against random ablations, alignment with
//! color directions, and concept/attribute correlations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::{
    collect_with_predictions, fit_class_bank, merge_banks, predict_all, project, ConceptBank, ConceptError,
    MergedBank, PatchConfig, TOP_PATCHES,
};
use crate::data::{assignment, BiasMode, DataError, Sample};
use crate::linalg::Matrix;
use crate::mitigate::{
    evaluate_predictions, random_ablation_set, suppress_with_coefficients, EvalReport, MitigateError,
};
use crate::model::{argmax, FrozenClassifier, ModelError};
use crate::probe::{identify, AuditRepresentations, BiasScoreTable, Identification, ProbeConfig, ProbeError};
use crate::stats::{
    alignment, correlation_report, estimate_bias_direction, CorrelationReport, DirectionEstimator, StatsError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Mitigate(#[from] MitigateError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid audit config: {0}")]
    InvalidConfig(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

/// Everything the audit needs beyond the model and the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Concepts per class.
    pub r: usize,
    /// Patch side length.
    pub s: usize,
    /// `None` uses the default stride for `s`.
    pub stride: Option<usize>,
    pub patch_cap: usize,
    pub top_patches: usize,
    /// Concepts whose cosine exceeds this merge.
    pub merge_threshold: f64,
    pub ablation_runs: usize,
    /// Significance level of the correlation tests.
    pub alpha: f64,
    pub direction: DirectionEstimator,
    pub probe: ProbeConfig,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            r: 8,
            s: 6,
            stride: None,
            patch_cap: 5000,
            top_patches: TOP_PATCHES,
            merge_threshold: 0.95,
            ablation_runs: 5,
            alpha: 0.05,
            direction: DirectionEstimator::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.into()));
        if self.r == 0 {
            return bad("r must be at least 1");
        }
        if self.s == 0 {
            return bad("s must be at least 1");
        }
        if self.stride == Some(0) {
            return bad("stride must be at least 1");
        }
        if self.patch_cap == 0 {
            return bad("patch_cap must be at least 1");
        }
        if !(-1.0..=1.0).contains(&self.merge_threshold) {
            return bad("merge_threshold must lie in [-1, 1]");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        self.probe.validate()?;
        Ok(())
    }

    pub fn patches(&self, seed: u64) -> PatchConfig {
        PatchConfig {
            size: self.s,
            stride: self.stride,
            cap: self.patch_cap,
            seed,
        }
    }
}

/// The color a class is expected to be confounded with. Unbiased training
/// has no such color; the class's own palette entry stands in.
pub fn class_color(mode: BiasMode, label: usize, num_classes: usize) -> usize {
    assignment(mode, label, num_classes).unwrap_or(label)
}

/// Banks of every class with at least one predicted audit sample, plus the
/// classes skipped for having none.
#[derive(Debug, Clone)]
pub struct Banks {
    pub banks: Vec<ConceptBank>,
    pub skipped: Vec<usize>,
}

pub fn fit_banks(model: &FrozenClassifier, audit: &[Sample], cfg: &AuditConfig, seed: u64) -> Result<Banks> {
    cfg.validate()?;
    let predictions = predict_all(model, audit)?;
    let patches = cfg.patches(seed);
    let mut banks = Vec::new();
    let mut skipped = Vec::new();
    for y in 0..model.classes() {
        match collect_with_predictions(model, audit, &predictions, y, &patches) {
            Ok(acts) => banks.push(fit_class_bank(&acts, cfg.r, seed, &patches, cfg.top_patches)?),
            Err(ConceptError::NoPredictedSamples(_)) => skipped.push(y),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Banks { banks, skipped })
}

/// Bias scores of every bank and the merged model-wide bank with flags.
#[derive(Debug, Clone)]
pub struct Scored {
    pub identification: Identification,
    pub merged: MergedBank,
}

pub fn score_and_merge(
    model: &FrozenClassifier,
    audit: &[Sample],
    banks: &[ConceptBank],
    cfg: &AuditConfig,
) -> Result<Scored> {
    let reps = AuditRepresentations::from_model(model, audit)?;
    let identification = identify(model, &reps, banks, &cfg.probe)?;
    let merged = merge_banks(banks, cfg.merge_threshold, Some(&identification.table), cfg.probe.tau)?;
    Ok(Scored { identification, merged })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub concepts: Vec<usize>,
    pub report: EvalReport,
}

/// Base, suppressed and random-ablation evaluations on one test set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mitigation {
    pub bias_set: Vec<usize>,
    pub base: EvalReport,
    pub suppressed: EvalReport,
    pub ablations: Vec<AblationRun>,
}

impl Mitigation {
    /// Mean worst-group accuracy over the ablation runs.
    pub fn ablation_mean_worst_group(&self) -> Option<f64> {
        if self.ablations.is_empty() {
            return None;
        }
        Some(self.ablations.iter().map(|a| a.report.worst_group_acc).sum::<f64>() / self.ablations.len() as f64)
    }

    /// One row per evaluation: `base`, `suppressed`, `ablation{i}` and
    /// `ablation_mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,concepts,accuracy,worst_class_acc,worst_group_acc\n");
        let set = |s: &[usize]| s.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let mut row = |name: &str, concepts: &str, r: &EvalReport| {
            out.push_str(&format!(
                "{name},{concepts},{},{},{}\n",
                r.accuracy, r.worst_class_acc, r.worst_group_acc
            ));
        };
        row("base", "", &self.base);
        row("suppressed", &set(&self.bias_set), &self.suppressed);
        for (i, a) in self.ablations.iter().enumerate() {
            row(&format!("ablation{i}"), &set(&a.concepts), &a.report);
        }
        if let Some(wg) = self.ablation_mean_worst_group() {
            let n = self.ablations.len() as f64;
            let mean = |f: fn(&EvalReport) -> f64| self.ablations.iter().map(|a| f(&a.report)).sum::<f64>() / n;
            out.push_str(&format!(
                "ablation_mean,,{},{},{wg}\n",
                mean(|r| r.accuracy),
                mean(|r| r.worst_class_acc)
            ));
        }
        out
    }
}

/// Seed of ablation run `run` for a pipeline seeded with `seed`.
pub fn ablation_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (run as u64 + 1)
}

pub fn mitigate(
    model: &FrozenClassifier,
    merged: &MergedBank,
    test: &[Sample],
    cfg: &AuditConfig,
    seed: u64,
) -> Result<Mitigation> {
    let features = model.features_batch(&test.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let coefficients = (0..test.len())
        .map(|i| project(&merged.concepts, features.row(i)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let evaluate = |set: &[usize]| -> Result<EvalReport> {
        let predictions = (0..test.len())
            .map(|i| {
                let a = suppress_with_coefficients(features.row(i), &coefficients[i], merged, set)?;
                Ok(argmax(&model.head_logits(&a)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(evaluate_predictions(test, &predictions)?)
    };
    let bias_set = merged.bias_set();
    let base = evaluate(&[])?;
    let suppressed = evaluate(&bias_set)?;
    let ablations = (0..cfg.ablation_runs)
        .map(|run| {
            let seed = ablation_seed(seed, run);
            let concepts = random_ablation_set(merged.len(), bias_set.len(), seed)?;
            let report = evaluate(&concepts)?;
            Ok(AblationRun { seed, concepts, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Mitigation {
        bias_set,
        base,
        suppressed,
        ablations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentRow {
    pub class: usize,
    pub concept: usize,
    pub color: usize,
    pub score: Option<f64>,
    pub cosine: f64,
    pub aligned: bool,
}

/// Cosine of every concept with its class's estimated color direction.
/// Classes whose direction is degenerate are left out.
pub fn alignment_table(
    model: &FrozenClassifier,
    banks: &[ConceptBank],
    scores: &BiasScoreTable,
    samples: &[Sample],
    mode: BiasMode,
    cfg: &AuditConfig,
    seed: u64,
) -> Result<Vec<AlignmentRow>> {
    let mut rows = Vec::new();
    for bank in banks {
        let y = bank.class_id;
        let color = class_color(mode, y, model.classes());
        let direction = match estimate_bias_direction(model, samples, y, color, cfg.direction, seed) {
            Ok(d) => d,
            Err(StatsError::ZeroDirection(_) | StatsError::NoSamples(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        for (k, a) in alignment(bank, &direction)?.into_iter().enumerate() {
            rows.push(AlignmentRow {
                class: y,
                concept: k,
                color,
                score: scores.score(y, k),
                cosine: a.cosine,
                aligned: a.aligned,
            });
        }
    }
    Ok(rows)
}

/// Whether some concept scoring above `tau` is aligned with its color.
pub fn bias_recovered(rows: &[AlignmentRow], tau: f64) -> bool {
    rows.iter().any(|r| r.aligned && r.score.is_some_and(|s| s > tau))
}

/// `|MCC|` of every merged concept against every one-vs-rest color on
/// `test`. A flagged concept is matched with the colors of its flagged members'
/// classes.
pub fn correlations(
    model: &FrozenClassifier,
    table: &BiasScoreTable,
    merged: &MergedBank,
    test: &[Sample],
    mode: BiasMode,
    cfg: &AuditConfig,
) -> Result<CorrelationReport> {
    let c = model.classes();
    let matching: Vec<Vec<usize>> = merged
        .clusters
        .iter()
        .map(|members| {
            let mut colors: Vec<usize> = members
                .iter()
                .filter(|id| table.score(id.class_id, id.index).is_some_and(|s| s > cfg.probe.tau))
                .map(|id| class_color(mode, id.class_id, c))
                .collect();
            colors.sort_unstable();
            colors.dedup();
            colors
        })
        .collect();
    let features: Matrix = model.features_batch(&test.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let attributes: Vec<Option<usize>> = test.iter().map(|s| s.bias_color).collect();
    Ok(correlation_report(
        &merged.concepts,
        &features,
        &attributes,
        c,
        &matching,
        cfg.alpha,
        cfg.probe.eps_active,
    )?)
}
