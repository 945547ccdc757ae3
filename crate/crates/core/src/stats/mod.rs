//! Statistical validation of identified concepts: MCC, χ² independence,
//! the one-sided Mann–Whitney U test and the color-direction alignment metric.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::concepts::{project, ConceptBank, ConceptError};
use crate::data::{recolor, Recolor, Sample};
use crate::linalg::{cosine_similarity, norm2, Matrix};
use crate::model::{FrozenClassifier, ModelError};
use crate::probe::indicator;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("sample {0} of the Mann-Whitney test is empty")]
    EmptySample(&'static str),
    #[error("no samples of class {0}")]
    NoSamples(usize),
    #[error("bias direction is degenerate (norm {0:e})")]
    ZeroDirection(f64),
    #[error("incompatible width: expected {expected}, found {found}")]
    IncompatibleWidth { expected: usize, found: usize },
    #[error("bias attributes are missing")]
    MissingBiasLabels,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
}

/// Cosine at or above which a concept counts as aligned with a bias direction.
pub const ALIGNMENT_THRESHOLD: f64 = 0.55;

/// Counts of a pair of binary variables `(x, y)`; `n10` is `x` true, `y` false.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ContingencyTable2x2 {
    pub n11: u64,
    pub n10: u64,
    pub n01: u64,
    pub n00: u64,
}

impl ContingencyTable2x2 {
    pub fn new(n11: u64, n10: u64, n01: u64, n00: u64) -> Self {
        Self { n11, n10, n01, n00 }
    }

    pub fn from_pairs(x: &[bool], y: &[bool]) -> Self {
        let mut t = Self::default();
        for (&a, &b) in x.iter().zip(y) {
            match (a, b) {
                (true, true) => t.n11 += 1,
                (true, false) => t.n10 += 1,
                (false, true) => t.n01 += 1,
                (false, false) => t.n00 += 1,
            }
        }
        t
    }

    pub fn total(&self) -> u64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }

    /// Row sums and column sums.
    fn marginals(&self) -> [f64; 4] {
        [
            (self.n11 + self.n10) as f64,
            (self.n01 + self.n00) as f64,
            (self.n11 + self.n01) as f64,
            (self.n10 + self.n00) as f64,
        ]
    }
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(t: &ContingencyTable2x2) -> f64 {
    let m = t.marginals();
    if m.contains(&0.0) {
        return 0.0;
    }
    let num = t.n11 as f64 * t.n00 as f64 - t.n10 as f64 * t.n01 as f64;
    (num / (m[0] * m[1] * m[2] * m[3]).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Chi2Result {
    pub statistic: f64,
    pub p_value: f64,
}

/// Pearson χ² test of independence, one degree of freedom, no continuity
/// correction. A zero marginal gives statistic 0 and p = 1.
pub fn chi2_independence(t: &ContingencyTable2x2) -> Chi2Result {
    let m = t.marginals();
    if m.contains(&0.0) {
        return Chi2Result {
            statistic: 0.0,
            p_value: 1.0,
        };
    }
    let n = t.total() as f64;
    let diff = t.n11 as f64 * t.n00 as f64 - t.n10 as f64 * t.n01 as f64;
    let statistic = n * diff * diff / (m[0] * m[1] * m[2] * m[3]);
    Chi2Result {
        statistic,
        p_value: erfc((statistic / 2.0).sqrt()).min(1.0),
    }
}

/// Products `n1 · n2` up to this size use the exact null distribution when
/// there are no ties.
pub const EXACT_LIMIT: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitneyResult {
    /// U statistic of the `greater` sample.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks of `values`, 1-based, plus the tie groups' sizes.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// `P(U ≥ u)` under the null, by counting rank arrangements.
fn exact_upper_tail(n1: usize, n2: usize, u: f64) -> f64 {
    // ways[j][k]: arrangements of i first-sample and j second-sample values with U = k.
    let max_u = n1 * n2;
    let mut prev: Vec<Vec<u128>> = (0..=n2).map(|_| vec![0; max_u + 1]).collect();
    for row in prev.iter_mut() {
        row[0] = 1;
    }
    for _i in 1..=n1 {
        let mut cur: Vec<Vec<u128>> = (0..=n2).map(|_| vec![0; max_u + 1]).collect();
        cur[0][0] = 1;
        for j in 1..=n2 {
            for k in 0..=max_u {
                // Largest value from sample 1 beats all j of sample 2, or from sample 2 beats none.
                let from_first = if k >= j { prev[j][k - j] } else { 0 };
                cur[j][k] = from_first + cur[j - 1][k];
            }
        }
        prev = cur;
    }
    let counts = &prev[n2];
    let total: u128 = counts.iter().sum();
    let threshold = u.ceil() as usize;
    let tail: u128 = counts.iter().skip(threshold).sum();
    tail as f64 / total as f64
}

/// One-sided Mann–Whitney U test of `greater` being stochastically larger than
/// `lesser`.
pub fn mann_whitney_u_one_sided(greater: &[f64], lesser: &[f64]) -> Result<MannWhitneyResult, StatsError> {
    if greater.is_empty() {
        return Err(StatsError::EmptySample("greater"));
    }
    if lesser.is_empty() {
        return Err(StatsError::EmptySample("lesser"));
    }
    let (n1, n2) = (greater.len(), lesser.len());
    let pooled: Vec<f64> = greater.iter().chain(lesser).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;

    if ties.is_empty() && n1 * n2 <= EXACT_LIMIT {
        return Ok(MannWhitneyResult {
            u,
            p_value: exact_upper_tail(n1, n2, u),
            exact: true,
        });
    }
    Ok(MannWhitneyResult {
        u,
        p_value: normal_upper_tail(u, n1, n2, &ties),
        exact: false,
    })
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_upper_tail(u: f64, n1: usize, n2: usize, ties: &[usize]) -> f64 {
    let (a, b) = (n1 as f64, n2 as f64);
    let n = a + b;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = a * b / 12.0 * ((n + 1.0) - tie_term);
    let shifted = u - a * b / 2.0 - 0.5;
    if var <= 0.0 {
        return if shifted > 0.0 { 0.0 } else { 1.0 };
    }
    let z = shifted / var.sqrt();
    (0.5 * erfc(z / std::f64::consts::SQRT_2)).clamp(0.0, 1.0)
}

/// Exposes the approximate path for comparison with the exact one.
pub fn mann_whitney_normal_approx(greater: &[f64], lesser: &[f64]) -> Result<f64, StatsError> {
    if greater.is_empty() || lesser.is_empty() {
        return Err(StatsError::EmptySample(if greater.is_empty() { "greater" } else { "lesser" }));
    }
    let pooled: Vec<f64> = greater.iter().chain(lesser).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let n1 = greater.len();
    let u = ranks[..n1].iter().sum::<f64>() - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(normal_upper_tail(u, n1, lesser.len(), &ties))
}

/// How the color-bias direction of a class is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionEstimator {
    /// Mean of `g(x recolored c) − g(x recolored gray)` over class samples.
    #[default]
    Counterfactual,
    /// Mean `g` of class samples carrying color `c` minus that of the rest.
    ClassMeanDifference,
}

/// Maximum number of class samples used for a direction.
pub const DIRECTION_SAMPLES: usize = 500;

/// Unnormalized mean difference behind [`estimate_bias_direction`].
pub fn bias_direction_raw(
    model: &FrozenClassifier,
    samples: &[Sample],
    y: usize,
    color: usize,
    estimator: DirectionEstimator,
    seed: u64,
) -> Result<Vec<f64>, StatsError> {
    let mut class: Vec<&Sample> = samples.iter().filter(|s| s.label == y).collect();
    if class.is_empty() {
        return Err(StatsError::NoSamples(y));
    }
    if class.len() > DIRECTION_SAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (y as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        let mut keep = index::sample(&mut rng, class.len(), DIRECTION_SAMPLES).into_vec();
        keep.sort_unstable();
        class = keep.into_iter().map(|i| class[i]).collect();
    }
    let p = model.representation_width();
    match estimator {
        DirectionEstimator::Counterfactual => {
            let diffs: Vec<Vec<f64>> = class
                .par_iter()
                .map(|s| {
                    let colored = model.features(&recolor(s, Recolor::Color(color)).image)?;
                    let gray = model.features(&recolor(s, Recolor::Neutral).image)?;
                    Ok(colored.iter().zip(&gray).map(|(a, b)| a - b).collect())
                })
                .collect::<Result<_, ModelError>>()?;
            Ok(mean_rows(&diffs, p))
        }
        DirectionEstimator::ClassMeanDifference => {
            let feats: Vec<(bool, Vec<f64>)> = class
                .par_iter()
                .map(|s| Ok((s.bias_color == Some(color), model.features(&s.image)?)))
                .collect::<Result<_, ModelError>>()?;
            let with: Vec<Vec<f64>> = feats.iter().filter(|f| f.0).map(|f| f.1.clone()).collect();
            let without: Vec<Vec<f64>> = feats.iter().filter(|f| !f.0).map(|f| f.1.clone()).collect();
            if with.is_empty() || without.is_empty() {
                return Err(StatsError::NoSamples(y));
            }
            let (a, b) = (mean_rows(&with, p), mean_rows(&without, p));
            Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
        }
    }
}

fn mean_rows(rows: &[Vec<f64>], p: usize) -> Vec<f64> {
    let mut acc = vec![0.0; p];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    acc
}

/// Unit-norm color-bias direction of class `y` for color `color`.
pub fn estimate_bias_direction(
    model: &FrozenClassifier,
    samples: &[Sample],
    y: usize,
    color: usize,
    estimator: DirectionEstimator,
    seed: u64,
) -> Result<Vec<f64>, StatsError> {
    let raw = bias_direction_raw(model, samples, y, color, estimator, seed)?;
    let n = norm2(&raw);
    if n <= 1e-12 {
        return Err(StatsError::ZeroDirection(n));
    }
    Ok(raw.iter().map(|v| v / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Alignment {
    pub cosine: f64,
    pub aligned: bool,
}

/// Cosine of every concept of `bank` with `direction`; dead concepts get 0.
pub fn alignment(bank: &ConceptBank, direction: &[f64]) -> Result<Vec<Alignment>, StatsError> {
    if direction.len() != bank.width() {
        return Err(StatsError::IncompatibleWidth {
            expected: bank.width(),
            found: direction.len(),
        });
    }
    Ok((0..bank.rank())
        .map(|k| {
            let cosine = cosine_similarity(&bank.concepts.column(k), direction).unwrap_or(0.0);
            Alignment {
                cosine,
                aligned: cosine >= ALIGNMENT_THRESHOLD,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairGroup {
    BiasConcept,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairStat {
    pub concept: usize,
    pub attribute: usize,
    pub mcc_abs: f64,
    pub p: f64,
    pub significant: bool,
    pub group: PairGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationSummary {
    pub n_bias: usize,
    pub n_other: usize,
    pub f_bias: Option<f64>,
    pub f_other: Option<f64>,
    /// Mean `|Φ|` over significant pairs of each group.
    pub mean_phi_bias: Option<f64>,
    pub mean_phi_other: Option<f64>,
    /// One-sided U test of bias-pair `|MCC|` over other-pair `|MCC|`.
    pub mannwhitney_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub pairs: Vec<PairStat>,
    pub summary: CorrelationSummary,
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("concept,attribute,mcc_abs,p,significant,group\n");
        for p in &self.pairs {
            let group = match p.group {
                PairGroup::BiasConcept => "bias_concept",
                PairGroup::Other => "other",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{group}\n",
                p.concept, p.attribute, p.mcc_abs, p.p, p.significant
            ));
        }
        out
    }

    pub fn mcc_by_group(&self) -> (Vec<f64>, Vec<f64>) {
        let pick = |g: PairGroup| self.pairs.iter().filter(|p| p.group == g).map(|p| p.mcc_abs).collect();
        (pick(PairGroup::BiasConcept), pick(PairGroup::Other))
    }
}

/// Correlates binarized merged-concept activity with one-vs-rest bias
/// attributes on a labeled test set.
///
/// `matching[k]` lists the attribute values paired with merged concept `k` as
/// an identified bias; it is empty for concepts outside `B`.
pub fn correlation_report(
    merged_concepts: &Matrix,
    activations: &Matrix,
    attributes: &[Option<usize>],
    num_attributes: usize,
    matching: &[Vec<usize>],
    alpha: f64,
    eps_active: f64,
) -> Result<CorrelationReport, StatsError> {
    if attributes.len() != activations.rows() || attributes.iter().any(Option::is_none) {
        return Err(StatsError::MissingBiasLabels);
    }
    let m = merged_concepts.cols();
    if matching.len() != m {
        return Err(StatsError::IncompatibleWidth {
            expected: m,
            found: matching.len(),
        });
    }
    let active: Vec<Vec<bool>> = (0..activations.rows())
        .into_par_iter()
        .map(|i| Ok(indicator(&project(merged_concepts, activations.row(i))?, eps_active)))
        .collect::<Result<_, ConceptError>>()?;

    let mut pairs = Vec::with_capacity(m * num_attributes);
    for k in 0..m {
        let x: Vec<bool> = active.iter().map(|row| row[k]).collect();
        for c in 0..num_attributes {
            let y: Vec<bool> = attributes.iter().map(|a| *a == Some(c)).collect();
            let table = ContingencyTable2x2::from_pairs(&x, &y);
            let p = chi2_independence(&table).p_value;
            pairs.push(PairStat {
                concept: k,
                attribute: c,
                mcc_abs: mcc(&table).abs(),
                p,
                significant: p < alpha,
                group: if matching[k].contains(&c) {
                    PairGroup::BiasConcept
                } else {
                    PairGroup::Other
                },
            });
        }
    }
    let summary = summarize(&pairs);
    Ok(CorrelationReport { pairs, summary })
}

fn summarize(pairs: &[PairStat]) -> CorrelationSummary {
    let group = |g: PairGroup| pairs.iter().filter(move |p| p.group == g);
    let frac = |g: PairGroup| {
        let n = group(g).count();
        (n > 0).then(|| group(g).filter(|p| p.significant).count() as f64 / n as f64)
    };
    let mean_phi = |g: PairGroup| {
        let sig: Vec<f64> = group(g).filter(|p| p.significant).map(|p| p.mcc_abs).collect();
        (!sig.is_empty()).then(|| sig.iter().sum::<f64>() / sig.len() as f64)
    };
    let bias: Vec<f64> = group(PairGroup::BiasConcept).map(|p| p.mcc_abs).collect();
    let other: Vec<f64> = group(PairGroup::Other).map(|p| p.mcc_abs).collect();
    CorrelationSummary {
        n_bias: bias.len(),
        n_other: other.len(),
        f_bias: frac(PairGroup::BiasConcept),
        f_other: frac(PairGroup::Other),
        mean_phi_bias: mean_phi(PairGroup::BiasConcept),
        mean_phi_other: mean_phi(PairGroup::Other),
        mannwhitney_p: mann_whitney_u_one_sided(&bias, &other).ok().map(|r| r.p_value),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mcc_examples() {
        assert_eq!(mcc(&ContingencyTable2x2::new(5, 0, 0, 5)), 1.0);
        assert_eq!(mcc(&ContingencyTable2x2::new(25, 25, 25, 25)), 0.0);
        assert_eq!(mcc(&ContingencyTable2x2::new(5, 5, 0, 0)), 0.0);
    }

    #[test]
    fn chi2_examples() {
        let r = chi2_independence(&ContingencyTable2x2::new(25, 25, 25, 25));
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let r = chi2_independence(&ContingencyTable2x2::new(30, 10, 10, 30));
        assert!((r.statistic - 20.0).abs() < 1e-12);
        let r = chi2_independence(&ContingencyTable2x2::new(0, 0, 3, 4));
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn midranks_handle_ties() {
        let (r, t) = midranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![2]);
    }

    #[test]
    fn exact_examples() {
        let r = mann_whitney_u_one_sided(&[10.0, 11.0, 12.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(r.exact);
        assert!((r.p_value - 0.05).abs() < 1e-15);
        let r = mann_whitney_u_one_sided(&[1.0, 2.0], &[10.0, 11.0]).unwrap();
        assert!(r.p_value >= 0.9);
        let r = mann_whitney_u_one_sided(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(!r.exact && r.p_value >= 0.5);
        assert!(matches!(mann_whitney_u_one_sided(&[], &[1.0]), Err(StatsError::EmptySample(_))));
    }

    #[test]
    fn exact_distribution_sums_to_one() {
        assert!((exact_upper_tail(4, 6, 0.0) - 1.0).abs() < 1e-15);
        // P(U ≥ n1 n2) = 1 / C(n, n1)
        assert!((exact_upper_tail(4, 6, 24.0) - 1.0 / 210.0).abs() < 1e-15);
    }

    #[test]
    fn identical_activation_and_label_is_perfectly_correlated() {
        let concepts = Matrix::from_columns(&[vec![1.0, 0.0]]).unwrap();
        let acts = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 0.0],
            vec![0.0, 3.0],
            vec![1.5, 0.0],
            vec![0.0, 0.5],
        ])
        .unwrap();
        let attrs = vec![Some(1), Some(0), Some(1), Some(0), Some(1), Some(0)];
        let r = correlation_report(&concepts, &acts, &attrs, 2, &[vec![1]], 0.05, 1e-8).unwrap();
        assert_eq!(r.pairs.len(), 2);
        let p = &r.pairs[1];
        assert_eq!((p.attribute, p.group), (1, PairGroup::BiasConcept));
        assert_eq!(p.mcc_abs, 1.0);
        assert!(p.significant);
        assert_eq!(r.summary.f_bias, Some(1.0));
    }

    #[test]
    fn missing_labels_are_rejected() {
        let concepts = Matrix::from_columns(&[vec![1.0]]).unwrap();
        let acts = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let r = correlation_report(&concepts, &acts, &[None], 2, &[vec![]], 0.05, 1e-8);
        assert!(matches!(r, Err(StatsError::MissingBiasLabels)));
    }
}
