//! The subcommands. Each one reads its inputs from the run directory, checks
//! that they carry this run's config hash, and writes stamped outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use biasprobe::concepts::{
    bank_from_bytes, bank_to_bytes, fit_class_bank, merge_banks, merged_from_bytes, merged_to_bytes,
    write_gallery, ClassActivations, ConceptBank, MergedBank, PatchConfig, PatchOrigin,
};
use biasprobe::data::export::{read_dataset, write_dataset, MANIFEST};
use biasprobe::data::{generate, read_bundle, read_head, split_of, Sample, Split};
use biasprobe::linalg::Matrix;
use biasprobe::mitigate::EvalReport;
use biasprobe::model::{checkpoint_bytes, checkpoint_from_bytes, train, FrozenClassifier};
use biasprobe::pipeline::{self, AlignmentRow, Mitigation};
use biasprobe::probe::{identify, AuditRepresentations, BiasScoreTable, ScoreRow};
use biasprobe::stats::CorrelationReport;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::stamp::Stamp;

type Result<T> = std::result::Result<T, CliError>;

/// One seed's configuration and output directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub stamp: Stamp,
    pub root: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    epochs: usize,
    final_loss: f64,
    train_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankIndex {
    classes: Vec<usize>,
    skipped: Vec<usize>,
    r: usize,
    patch_size: usize,
    stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergedSummary {
    pub concepts: usize,
    pub bias_set: Vec<usize>,
    /// Members of every merged concept as `[class, index]` pairs.
    pub clusters: Vec<Vec<[usize; 2]>>,
    pub dropped: Vec<[usize; 2]>,
}

impl MergedSummary {
    fn of(merged: &MergedBank) -> Self {
        let pair = |id: &biasprobe::concepts::ConceptId| [id.class_id, id.index];
        Self {
            concepts: merged.len(),
            bias_set: merged.bias_set(),
            clusters: merged.clusters.iter().map(|c| c.iter().map(pair).collect()).collect(),
            dropped: merged.dropped.iter().map(pair).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoresDoc {
    pub tau: f64,
    pub max_score: Option<f64>,
    pub skipped_classes: Vec<usize>,
    pub merged: MergedSummary,
    pub rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MitigationDoc {
    pub bias_set: Vec<usize>,
    pub base: EvalRow,
    pub suppressed: EvalRow,
    pub ablations: Vec<EvalRow>,
    pub ablation_mean_worst_group: Option<f64>,
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub concepts: Vec<usize>,
    pub accuracy: f64,
    pub worst_class_acc: f64,
    pub worst_group_acc: f64,
}

impl EvalRow {
    fn of(concepts: &[usize], r: &EvalReport) -> Self {
        Self {
            concepts: concepts.to_vec(),
            accuracy: r.accuracy,
            worst_class_acc: r.worst_class_acc,
            worst_group_acc: r.worst_group_acc,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportDoc {
    pub seed: u64,
    pub config: RunConfig,
    pub train: serde_json::Value,
    pub scores: ScoresDoc,
    pub mitigation: MitigationDoc,
    pub alignment: Vec<AlignmentRow>,
    pub bias_recovered: bool,
    pub correlations: CorrelationReport,
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("artifact serializes")
}

impl Context {
    pub fn new(config: RunConfig, root: PathBuf) -> Result<Self> {
        config.validate()?;
        let stamp = Stamp::new(config.hash());
        Ok(Self { config, stamp, root })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn bank_path(&self, class: usize) -> PathBuf {
        self.root.join("banks").join(format!("class{class}.cbk"))
    }

    fn log(&self, msg: &str) {
        eprintln!("[seed {}] {msg}", self.config.seed);
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        let dir = self.path("data");
        self.stamp.check_manifest(&dir.join(MANIFEST))?;
        Ok(read_dataset(&dir)?)
    }

    pub fn load_model(&self) -> Result<FrozenClassifier> {
        Ok(checkpoint_from_bytes(&self.stamp.read_binary(&self.path("model.mlp1"))?)?)
    }

    fn load_banks(&self) -> Result<(Vec<ConceptBank>, BankIndex)> {
        let index: BankIndex = self.stamp.read_json_as(&self.path("banks/index.json"))?;
        let banks = index
            .classes
            .iter()
            .map(|&y| Ok(bank_from_bytes(&self.stamp.read_binary(&self.bank_path(y))?)?))
            .collect::<Result<Vec<_>>>()?;
        Ok((banks, index))
    }

    fn load_merged(&self) -> Result<MergedBank> {
        Ok(merged_from_bytes(&self.stamp.read_binary(&self.path("merged.cbm"))?)?)
    }
}

pub fn gen_data(ctx: &Context) -> Result<()> {
    let t = Instant::now();
    let samples = generate(&ctx.config.dataset)?;
    write_dataset(ctx.path("data"), &samples, Some(&ctx.stamp.comment()))?;
    ctx.log(&format!("gen-data: {} samples in {:.1?}", samples.len(), t.elapsed()));
    Ok(())
}

pub fn train_model(ctx: &Context) -> Result<()> {
    let t = Instant::now();
    let samples = ctx.load_samples()?;
    let train_set = split_of(&samples, Split::Train);
    let report = train(&train_set, ctx.config.dataset.num_classes, &ctx.config.train)?;
    ctx.stamp
        .write_binary(&ctx.path("model.mlp1"), &checkpoint_bytes(&report.model))?;
    let mut log = String::from("epoch,lr,loss\n");
    for (e, loss) in report.loss_trace.iter().enumerate() {
        log.push_str(&format!("{e},{},{loss}\n", ctx.config.train.lr_at(e)));
    }
    ctx.stamp.write_csv(&ctx.path("train_log.csv"), &log)?;
    let final_loss = report.loss_trace.last().copied().unwrap_or(f64::NAN);
    ctx.stamp.write_json(
        &ctx.path("train.json"),
        &TrainSummary {
            epochs: report.loss_trace.len(),
            final_loss,
            train_accuracy: report.train_accuracy,
        },
    )?;
    ctx.log(&format!(
        "train: loss {final_loss:.4}, accuracy {:.4} in {:.1?}",
        report.train_accuracy,
        t.elapsed()
    ));
    Ok(())
}

pub fn concepts(ctx: &Context) -> Result<()> {
    let t = Instant::now();
    let model = ctx.load_model()?;
    let audit = split_of(&ctx.load_samples()?, Split::Audit);
    let cfg = ctx.config.audit();
    let fitted = pipeline::fit_banks(&model, &audit, &cfg, ctx.config.seed)?;
    let comment = ctx.stamp.comment();
    for bank in &fitted.banks {
        ctx.stamp
            .write_binary(&ctx.bank_path(bank.class_id), &bank_to_bytes(bank))?;
        let dir = ctx.path("gallery").join(format!("class{}", bank.class_id));
        write_gallery(bank, &audit, dir, ctx.config.gallery_size, Some(&comment))?;
    }
    let index = BankIndex {
        classes: fitted.banks.iter().map(|b| b.class_id).collect(),
        skipped: fitted.skipped.clone(),
        r: cfg.r,
        patch_size: cfg.s,
        stride: cfg.patches(ctx.config.seed).effective_stride(),
    };
    ctx.stamp.write_json(&ctx.path("banks/index.json"), &index)?;
    ctx.log(&format!(
        "concepts: {} banks, {} classes skipped in {:.1?}",
        fitted.banks.len(),
        fitted.skipped.len(),
        t.elapsed()
    ));
    Ok(())
}

pub fn score(ctx: &Context) -> Result<()> {
    let t = Instant::now();
    let model = ctx.load_model()?;
    let audit = split_of(&ctx.load_samples()?, Split::Audit);
    let (banks, index) = ctx.load_banks()?;
    let cfg = ctx.config.audit();
    let scored = pipeline::score_and_merge(&model, &audit, &banks, &cfg)?;
    let table = &scored.identification.table;
    ctx.stamp.write_csv(&ctx.path("scores.csv"), &table.to_csv())?;
    ctx.stamp
        .write_binary(&ctx.path("merged.cbm"), &merged_to_bytes(&scored.merged))?;
    let doc = ScoresDoc {
        tau: cfg.probe.tau,
        max_score: table.max_score(),
        skipped_classes: index.skipped,
        merged: MergedSummary::of(&scored.merged),
        rows: table.rows.clone(),
    };
    ctx.stamp.write_json(&ctx.path("scores.json"), &doc)?;
    ctx.log(&format!(
        "score: max {:?}, {} of {} merged concepts flagged in {:.1?}",
        doc.max_score,
        doc.merged.bias_set.len(),
        doc.merged.concepts,
        t.elapsed()
    ));
    Ok(())
}

pub fn mitigate(ctx: &Context) -> Result<()> {
    let t = Instant::now();
    let model = ctx.load_model()?;
    let test = split_of(&ctx.load_samples()?, Split::Test);
    let merged = ctx.load_merged()?;
    let m = pipeline::mitigate(&model, &merged, &test, &ctx.config.audit(), ctx.config.seed)?;
    ctx.stamp.write_csv(&ctx.path("mitigation.csv"), &m.to_csv())?;
    let doc = mitigation_doc(&m);
    ctx.stamp.write_json(&ctx.path("mitigation.json"), &doc)?;
    ctx.log(&format!(
        "mitigate: worst-group base {:.3}, suppressed {:.3}, ablation mean {:.3} in {:.1?}",
        doc.base.worst_group_acc,
        doc.suppressed.worst_group_acc,
        doc.ablation_mean_worst_group.unwrap_or(f64::NAN),
        t.elapsed()
    ));
    Ok(())
}

fn mitigation_doc(m: &Mitigation) -> MitigationDoc {
    MitigationDoc {
        bias_set: m.bias_set.clone(),
        base: EvalRow::of(&[], &m.base),
        suppressed: EvalRow::of(&m.bias_set, &m.suppressed),
        ablations: m.ablations.iter().map(|a| EvalRow::of(&a.concepts, &a.report)).collect(),
        ablation_mean_worst_group: m.ablation_mean_worst_group(),
        details: to_json(m),
    }
}

fn alignment_csv(rows: &[AlignmentRow]) -> String {
    let mut out = String::from("class,concept,color,score,cosine,aligned\n");
    for r in rows {
        let score = r.score.map(|s| s.to_string()).unwrap_or_else(|| "UNSCORED".into());
        out.push_str(&format!(
            "{},{},{},{score},{},{}\n",
            r.class, r.concept, r.color, r.cosine, r.aligned
        ));
    }
    out
}

/// Consolidates every artifact of the run directory into `report.json`,
/// adding concept alignment and concept/attribute correlations.
pub fn report(ctx: &Context) -> Result<ReportDoc> {
    let t = Instant::now();
    let train_doc = ctx.stamp.read_json(&ctx.path("train.json"))?;
    let scores: ScoresDoc = ctx.stamp.read_json_as(&ctx.path("scores.json"))?;
    let mitigation: MitigationDoc = ctx.stamp.read_json_as(&ctx.path("mitigation.json"))?;
    let model = ctx.load_model()?;
    let (banks, _) = ctx.load_banks()?;
    let merged = ctx.load_merged()?;
    let test = split_of(&ctx.load_samples()?, Split::Test);

    let cfg = ctx.config.audit();
    let mode = ctx.config.dataset.bias_mode;
    let table = BiasScoreTable {
        rows: scores.rows.clone(),
    };
    let alignment = pipeline::alignment_table(&model, &banks, &table, &test, mode, &cfg, ctx.config.seed)?;
    let correlations = pipeline::correlations(&model, &table, &merged, &test, mode, &cfg)?;
    ctx.stamp.write_csv(&ctx.path("alignment.csv"), &alignment_csv(&alignment))?;
    ctx.stamp.write_csv(&ctx.path("correlations.csv"), &correlations.to_csv())?;
    let doc = ReportDoc {
        seed: ctx.config.seed,
        config: ctx.config.clone(),
        train: train_doc,
        bias_recovered: pipeline::bias_recovered(&alignment, cfg.probe.tau),
        scores,
        mitigation,
        alignment,
        correlations,
    };
    ctx.stamp.write_json(&ctx.path("report.json"), &doc)?;
    ctx.log(&format!(
        "report: bias recovered {}, correlation p {:?} in {:.1?}",
        doc.bias_recovered,
        doc.correlations.summary.mannwhitney_p,
        t.elapsed()
    ));
    Ok(doc)
}

/// Audits an externally exported model from its activation bundle. Concept
/// banks are fit on the bundle rows predicted as each class, so there are no
/// patches and no gallery. Classes with fewer than `r` predicted rows are
/// listed as skipped.
pub fn audit_bundle(ctx: &Context, bundle_path: &Path, head_path: Option<&Path>) -> Result<()> {
    let t = Instant::now();
    let bundle = read_bundle(bundle_path).map_err(|e| match e {
        biasprobe::data::BundleError::Io(io) => CliError::io(bundle_path, io),
        e => e.into(),
    })?;
    let head = match (head_path, &bundle.head) {
        (Some(p), _) => read_head(p).map_err(|e| match e {
            biasprobe::data::BundleError::Io(io) => CliError::io(p, io),
            e => e.into(),
        })?,
        (None, Some(h)) => h.clone(),
        (None, None) => {
            return Err(CliError::Schema(
                "bundle has no HEAD section; pass a companion head file with --head".into(),
            ))
        }
    };
    if head.num_classes() != bundle.num_classes() || head.width() != bundle.width() {
        return Err(CliError::Schema(format!(
            "head is {}x{}, bundle has {} classes and {} features",
            head.num_classes(),
            head.width(),
            bundle.num_classes(),
            bundle.width()
        )));
    }
    let cfg = ctx.config.audit();
    cfg.validate()?;
    let reps = AuditRepresentations::from_bundle(&bundle)?;
    let patches = PatchConfig {
        size: 0,
        stride: Some(0),
        cap: usize::MAX,
        seed: ctx.config.seed,
    };
    let mut banks = Vec::new();
    let mut skipped = Vec::new();
    for y in 0..bundle.num_classes() {
        let rows: Vec<usize> = (0..bundle.len()).filter(|&i| bundle.predictions[i] == y).collect();
        // Without patches every row is one sample, so small classes cannot
        // support r concepts.
        if rows.len() < cfg.r {
            skipped.push(y);
            continue;
        }
        let acts = ClassActivations {
            class_id: y,
            activations: Matrix::from_rows(&rows.iter().map(|&i| bundle.activations.row(i)).collect::<Vec<_>>())
                .map_err(|e| CliError::Schema(e.to_string()))?,
            origins: rows
                .iter()
                .map(|&i| PatchOrigin {
                    sample_id: i,
                    row: 0,
                    col: 0,
                })
                .collect(),
        };
        banks.push(
            fit_class_bank(&acts, cfg.r, ctx.config.seed, &patches, cfg.top_patches)
                .map_err(CliError::from)?,
        );
    }
    let identification = identify(&head, &reps, &banks, &cfg.probe)?;
    let merged = merge_banks(&banks, cfg.merge_threshold, Some(&identification.table), cfg.probe.tau)?;
    let table = &identification.table;
    ctx.stamp.write_csv(&ctx.path("bundle_scores.csv"), &table.to_csv())?;
    #[derive(Serialize)]
    struct BundleScores<'a> {
        model_id: &'a str,
        layer_name: &'a str,
        n: usize,
        p: usize,
        classes: usize,
        scores: ScoresDoc,
    }
    let doc = BundleScores {
        model_id: &bundle.model_id,
        layer_name: &bundle.layer_name,
        n: bundle.len(),
        p: bundle.width(),
        classes: bundle.num_classes(),
        scores: ScoresDoc {
            tau: cfg.probe.tau,
            max_score: table.max_score(),
            skipped_classes: skipped,
            merged: MergedSummary::of(&merged),
            rows: table.rows.clone(),
        },
    };
    ctx.stamp.write_json(&ctx.path("bundle_scores.json"), &doc)?;
    ctx.log(&format!(
        "audit-bundle: {} rows of {}, max score {:?} in {:.1?}",
        doc.n,
        doc.model_id,
        doc.scores.max_score,
        t.elapsed()
    ));
    Ok(())
}

/// The full pipeline for one seed.
pub fn run_seed(ctx: &Context) -> Result<ReportDoc> {
    gen_data(ctx)?;
    train_model(ctx)?;
    concepts(ctx)?;
    score(ctx)?;
    mitigate(ctx)?;
    report(ctx)
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, se })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRow {
    pub seed: u64,
    pub max_score: Option<f64>,
    pub bias_recovered: bool,
    pub flagged: usize,
    pub base_accuracy: f64,
    pub base_worst_group: f64,
    pub suppressed_accuracy: f64,
    pub suppressed_worst_group: f64,
    pub ablation_worst_group: Option<f64>,
    pub f_bias: Option<f64>,
    pub f_other: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub seeds: Vec<SeedRow>,
    pub recovered_seeds: usize,
    pub suppression_beats_ablation: usize,
    pub base_worst_group: Option<MeanSe>,
    pub suppressed_worst_group: Option<MeanSe>,
    pub ablation_worst_group: Option<MeanSe>,
    pub base_accuracy: Option<MeanSe>,
    pub suppressed_accuracy: Option<MeanSe>,
    pub max_score: Option<MeanSe>,
}

impl Summary {
    fn of(seeds: Vec<SeedRow>) -> Self {
        let col = |f: &dyn Fn(&SeedRow) -> Option<f64>| MeanSe::of(&seeds.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            recovered_seeds: seeds.iter().filter(|s| s.bias_recovered).count(),
            suppression_beats_ablation: seeds
                .iter()
                .filter(|s| s.ablation_worst_group.is_some_and(|a| s.suppressed_worst_group > a))
                .count(),
            base_worst_group: col(&|s| Some(s.base_worst_group)),
            suppressed_worst_group: col(&|s| Some(s.suppressed_worst_group)),
            ablation_worst_group: col(&|s| s.ablation_worst_group),
            base_accuracy: col(&|s| Some(s.base_accuracy)),
            suppressed_accuracy: col(&|s| Some(s.suppressed_accuracy)),
            max_score: col(&|s| s.max_score),
            seeds,
        }
    }

    fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(
            "seed,max_score,bias_recovered,flagged,base_accuracy,base_worst_group,suppressed_accuracy,suppressed_worst_group,ablation_worst_group,f_bias,f_other\n",
        );
        for s in &self.seeds {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                s.seed,
                opt(s.max_score),
                s.bias_recovered,
                s.flagged,
                s.base_accuracy,
                s.base_worst_group,
                s.suppressed_accuracy,
                s.suppressed_worst_group,
                opt(s.ablation_worst_group),
                opt(s.f_bias),
                opt(s.f_other)
            ));
        }
        out
    }
}

fn seed_row(r: &ReportDoc) -> SeedRow {
    SeedRow {
        seed: r.seed,
        max_score: r.scores.max_score,
        bias_recovered: r.bias_recovered,
        flagged: r.mitigation.bias_set.len(),
        base_accuracy: r.mitigation.base.accuracy,
        base_worst_group: r.mitigation.base.worst_group_acc,
        suppressed_accuracy: r.mitigation.suppressed.accuracy,
        suppressed_worst_group: r.mitigation.suppressed.worst_group_acc,
        ablation_worst_group: r.mitigation.ablation_mean_worst_group,
        f_bias: r.correlations.summary.f_bias,
        f_other: r.correlations.summary.f_other,
    }
}

/// Runs `n_seeds` consecutive seeds from `config.seed`, each in `root/seed{N}`,
/// and writes `summary.json` / `summary.csv` with means and standard errors.
pub fn run_all(config: &RunConfig, root: &Path) -> Result<Summary> {
    let base = Context::new(config.clone(), root.to_path_buf())?;
    let contexts = (0..config.n_seeds as u64)
        .map(|i| {
            let seed = config.seed + i;
            Context::new(config.with_seed(seed), root.join(format!("seed{seed}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = if config.parallel_seeds {
        contexts.par_iter().map(run_seed).collect::<Result<Vec<_>>>()?
    } else {
        contexts.iter().map(run_seed).collect::<Result<Vec<_>>>()?
    };
    let summary = Summary::of(reports.iter().map(seed_row).collect());
    base.stamp.write_json(&root.join("summary.json"), &summary)?;
    base.stamp.write_csv(&root.join("summary.csv"), &summary.to_csv())?;
    Ok(summary)
}
