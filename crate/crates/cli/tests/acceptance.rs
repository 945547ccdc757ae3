//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! numbers next to the pinned tolerances.
//!
//! Failing criteria are reported but only turn into a non-zero exit status
//! when `BIASPROBE_ACCEPTANCE_STRICT` is set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use biasprobe::concepts::{ConceptId, MergedBank};
use biasprobe::data::BiasMode;
use biasprobe::linalg::{nmf, nnls, norm2, Matrix, NmfConfig};
use biasprobe::mitigate::suppress;
use biasprobe::model::{cross_entropy, Dense, FrozenClassifier};
use biasprobe::stats::{chi2_independence, mann_whitney_u_one_sided, mcc, ContingencyTable2x2};
use biasprobe_cli::commands::{run_seed, ReportDoc};
use biasprobe_cli::{Context, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;
const RUNTIME_BUDGET: Duration = Duration::from_secs(15 * 60);
const NUMERIC_BUDGET: Duration = Duration::from_secs(60);

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Check {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self { name, pass, detail }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn half_sq_residual(b: &Matrix, u: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    let r: Vec<f64> = b.matvec(u).unwrap().iter().zip(t).map(|(x, y)| x - y).collect();
    (0.5 * r.iter().map(|v| v * v).sum::<f64>(), r)
}

fn kkt_violation(b: &Matrix, u: &[f64], t: &[f64]) -> f64 {
    let g = b.tr_matvec(&half_sq_residual(b, u, t).1).unwrap();
    u.iter()
        .zip(&g)
        .map(|(&uk, &gk)| {
            let slack = if uk > 0.0 { gk.abs() } else { 0.0 };
            (-uk).max(0.0).max((-gk).max(0.0)).max(slack)
        })
        .fold(0.0, f64::max)
}

/// FISTA with adaptive restart and a power-iteration step size.
fn projected_gradient(b: &Matrix, t: &[f64], reference: f64) -> Vec<f64> {
    let mut v = vec![1.0; b.cols()];
    let mut lipschitz = 0.0;
    for _ in 0..200 {
        let w = b.tr_matvec(&b.matvec(&v).unwrap()).unwrap();
        let n = norm2(&w);
        if n == 0.0 {
            break;
        }
        lipschitz = n / norm2(&v);
        v = w.iter().map(|x| x / n).collect();
    }
    let step = 1.0 / (1.01 * lipschitz).max(1e-300);
    let mut x = vec![0.0; b.cols()];
    let mut y = x.clone();
    let mut momentum = 1.0f64;
    let mut prev = half_sq_residual(b, &x, t).0;
    for it in 0..200_000 {
        let g = b.tr_matvec(&half_sq_residual(b, &y, t).1).unwrap();
        let next: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| (yi - step * gi).max(0.0)).collect();
        let f = half_sq_residual(b, &next, t).0;
        let m_next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        if f > prev {
            momentum = 1.0;
            y = x.clone();
            continue;
        }
        y = next.iter().zip(&x).map(|(a, b)| a + (momentum - 1.0) / m_next * (a - b)).collect();
        x = next;
        momentum = m_next;
        prev = f;
        if f - reference <= 1e-11 || (it % 16 == 0 && kkt_violation(b, &x, t) < 1e-13) {
            break;
        }
    }
    x
}

fn nnls_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_kkt, mut worst_gap, mut ok) = (0.0f64, 0.0f64, true);
    for _ in 0..1000 {
        let (p, r) = (rng.random_range(1..=50), rng.random_range(1..=20));
        let b = random_matrix(&mut rng, p, r, -1.0, 1.0);
        let t: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u = nnls(&b, &t).unwrap();
        let scaled = kkt_violation(&b, &u, &t) / norm2(&t).max(1.0);
        let f = half_sq_residual(&b, &u, &t).0;
        let f_pg = half_sq_residual(&b, &projected_gradient(&b, &t, f), &t).0;
        worst_kkt = worst_kkt.max(scaled);
        worst_gap = worst_gap.max((f - f_pg).abs());
        ok &= u.iter().all(|&v| v >= 0.0) && scaled <= 1e-8 && (f - f_pg).abs() <= 1e-10;
    }
    Check::new(
        "nnls_kkt_and_oracle",
        ok,
        format!("1000 instances up to 50x20: max KKT/max(1,|a|) {worst_kkt:.2e} (tol 1e-8), max |f - f_pg| {worst_gap:.2e} (tol 1e-10)"),
    )
}

fn nmf_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut monotone = 0;
    for case in 0..100 {
        let (n, p) = (rng.random_range(2..=40), rng.random_range(2..=30));
        let a = random_matrix(&mut rng, n, p, 0.0, 1.0);
        let rank = rng.random_range(1..6usize).min(n).min(p);
        let res = nmf(&a, &NmfConfig::new(rank, case)).unwrap();
        if res.objective_trace.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (n, p, r) = (rng.random_range(20..60), rng.random_range(10..30), rng.random_range(1..5));
        let u = random_matrix(&mut rng, n, r, 0.0, 1.0);
        let w = random_matrix(&mut rng, p, r, 0.0, 1.0);
        let a = u.matmul(&w.transpose()).unwrap();
        let cfg = NmfConfig {
            max_outer_iters: 2000,
            rel_tol: 1e-12,
            restarts: 5,
            ..NmfConfig::new(r, case)
        };
        let res = nmf(&a, &cfg).unwrap();
        worst = worst.max(2.0 * res.objective() / a.frobenius_norm_sq());
    }
    Check::new(
        "nmf_monotone_and_exact",
        monotone == 100 && worst <= 1e-6,
        format!("{monotone}/100 traces non-increasing; 100 exact rank-r inputs (best of 5 starts): max |A-UW'|^2/|A|^2 {worst:.2e} (tol 1e-6)"),
    )
}

fn head_gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dense = |rng: &mut ChaCha8Rng, i: usize, o: usize| {
        Dense::new(
            i,
            o,
            (0..i * o).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            (0..o).map(|_| rng.random_range(-0.1f32..0.1)).collect(),
        )
        .unwrap()
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (p, c) = (rng.random_range(2..20), rng.random_range(2..10));
        let model = FrozenClassifier::from_layers(vec![dense(&mut rng, 6, 12), dense(&mut rng, 12, p)], dense(&mut rng, p, c))
            .unwrap();
        let a: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..3.0)).collect();
        let y = rng.random_range(0..c);
        let exact = model.head_gradient(&a, y).unwrap();
        let h = 1e-5;
        let fd: Vec<f64> = (0..p)
            .map(|i| {
                let (mut plus, mut minus) = (a.clone(), a.clone());
                plus[i] += h;
                minus[i] -= h;
                let loss = |v: &[f64]| cross_entropy(&model.head_logits(v).unwrap(), y);
                (loss(&plus) - loss(&minus)) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = exact.iter().zip(&fd).map(|(x, y)| x - y).collect();
        worst = worst.max(norm2(&diff) / norm2(&exact).max(1e-8));
    }
    Check::new(
        "head_gradient_vs_finite_differences",
        worst <= 1e-4,
        format!("100 random (a, y): max relative error {worst:.2e} (tol 1e-4)"),
    )
}

fn stats_check() -> Check {
    let t = |a, b, c, d| ContingencyTable2x2::new(a, b, c, d);
    let mut errors = Vec::new();
    let mut near = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-4 {
            errors.push(format!("{name}: {got} vs {want}"));
        }
    };
    near("mcc[[5,0],[0,5]]", mcc(&t(5, 0, 0, 5)), 1.0);
    near("mcc[[25,25],[25,25]]", mcc(&t(25, 25, 25, 25)), 0.0);
    // 28/√2352, evaluated by hand.
    near("mcc[[6,2],[1,5]]", mcc(&t(6, 2, 1, 5)), 0.577_350_269);
    let c = chi2_independence(&t(25, 25, 25, 25));
    near("chi2 independent stat", c.statistic, 0.0);
    near("chi2 independent p", c.p_value, 1.0);
    let c = chi2_independence(&t(30, 10, 10, 30));
    near("chi2[[30,10],[10,30]] stat", c.statistic, 20.0);
    near("chi2[[30,10],[10,30]] p", c.p_value, 7.744_216e-6);
    let c = chi2_independence(&t(0, 0, 4, 9));
    near("chi2 zero marginal p", c.p_value, 1.0);
    let u = mann_whitney_u_one_sided(&[10.0, 11.0, 12.0], &[1.0, 2.0, 3.0]).unwrap();
    near("U exact p", u.p_value, 0.05);
    let same = [1.0, 2.0, 3.0, 4.0];
    if mann_whitney_u_one_sided(&same, &same).unwrap().p_value < 0.5 {
        errors.push("U identical samples p < 0.5".into());
    }
    if mann_whitney_u_one_sided(&[1.0, 2.0], &[10.0, 11.0]).unwrap().p_value < 0.9 {
        errors.push("U wrong direction p < 0.9".into());
    }
    let detail = if errors.is_empty() {
        "11 tabled oracles within 1e-4; mcc[[6,2],[1,5]] = 0.57735 (the tabled 0.5797 is off by 2.4e-3)".into()
    } else {
        errors.join("; ")
    };
    Check::new("statistics_oracles", errors.is_empty(), detail)
}

fn suppression_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut identity, mut rescaled, mut checked, mut worst) = (0, 0, 0, 0.0f64);
    for _ in 0..1000 {
        let (p, m) = (rng.random_range(2..30), rng.random_range(1..10));
        let merged = MergedBank {
            concepts: random_matrix(&mut rng, p, m, 0.0, 1.0),
            clusters: (0..m).map(|k| vec![ConceptId { class_id: 0, index: k }]).collect(),
            bias_flags: vec![false; m],
            dropped: Vec::new(),
        };
        let a: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..5.0)).collect();
        if suppress(&a, &merged, &[]).unwrap() == a {
            identity += 1;
        }
        let bias: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.5)).collect();
        let u = biasprobe::concepts::project(&merged.concepts, &a).unwrap();
        let mut residual = a.clone();
        for &k in &bias {
            for (i, r) in residual.iter_mut().enumerate() {
                *r -= u[k] * merged.concepts.get(i, k);
            }
        }
        if norm2(&residual) > 1e-12 {
            checked += 1;
            let rel = (norm2(&suppress(&a, &merged, &bias).unwrap()) - norm2(&a)).abs() / norm2(&a);
            worst = worst.max(rel);
            if rel <= 1e-6 {
                rescaled += 1;
            }
        }
    }
    Check::new(
        "suppression_algebra",
        identity == 1000 && rescaled == checked,
        format!("B empty is identity on {identity}/1000; norm kept on {rescaled}/{checked} with residual > 1e-12, max relative drift {worst:.2e} (tol 1e-6)"),
    )
}

fn artifacts(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(path.extension().and_then(|e| e.to_str()), Some("csv" | "json")) {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Re-runs seed 0 through the command-line binary and compares every CSV and
/// JSON artifact with the in-process run already in `library_dir`.
fn determinism_check(library_dir: &Path, scratch: &Path) -> Check {
    let out = scratch.join("cli");
    let status = Command::new(env!("CARGO_BIN_EXE_biasprobe"))
        .args(["--seed", "0", "--out", out.to_str().unwrap()])
        .args(["run", "--n-seeds", "1"])
        .status()
        .expect("biasprobe binary runs");
    if !status.success() {
        return Check::new("pipeline_determinism", false, format!("biasprobe run exited with {status}"));
    }
    let (a, b) = (artifacts(library_dir), artifacts(&out.join("seed0")));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    Check::new(
        "pipeline_determinism",
        differing.is_empty() && !a.is_empty(),
        if differing.is_empty() {
            format!("seed 0 run twice (library and CLI): {} CSV/JSON artifacts byte-identical", a.len())
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    )
}

fn run_seeds(config: &RunConfig, root: &Path) -> Vec<ReportDoc> {
    (0..SEEDS)
        .map(|seed| {
            let t = Instant::now();
            let ctx = Context::new(config.with_seed(seed), root.join(format!("seed{seed}"))).unwrap();
            let report = run_seed(&ctx).unwrap();
            eprintln!("  {:?} seed {seed} done in {:.0?}", config.dataset.bias_mode, t.elapsed());
            report
        })
        .collect()
}

fn per_seed<T: std::fmt::Display>(values: impl Iterator<Item = T>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn main() {
    let start = Instant::now();
    let mut checks = vec![nnls_check(), nmf_check(), head_gradient_check(), stats_check(), suppression_check()];
    let numeric = start.elapsed();
    checks.push(Check::new(
        "numerical_core_runtime",
        numeric <= NUMERIC_BUDGET,
        format!("{:.1}s (budget 60s)", numeric.as_secs_f64()),
    ));

    let scratch = tempfile::tempdir().unwrap();
    // The binary runs on defaults too, which keeps the determinism rerun
    // comparable with seed 0 below.
    let biased = RunConfig::default();
    let unbiased = {
        let mut c = biased.clone();
        c.dataset.bias_mode = BiasMode::Unbiased;
        c
    };

    let t = Instant::now();
    let biased_runs = run_seeds(&biased, &scratch.path().join("biased"));
    let unbiased_runs = run_seeds(&unbiased, &scratch.path().join("unbiased"));
    let experiment = t.elapsed();

    let recovered = biased_runs.iter().filter(|r| r.bias_recovered).count();
    checks.push(Check::new(
        "bias_recovery",
        recovered >= 8,
        format!(
            "{recovered}/10 seeds (need 8); max S per seed: {}",
            per_seed(biased_runs.iter().map(|r| fmt_opt(r.scores.max_score)))
        ),
    ));

    let quiet = unbiased_runs.iter().filter(|r| r.scores.max_score.is_none_or(|s| s <= 0.7)).count();
    checks.push(Check::new(
        "unbiased_no_score_above_0.7",
        quiet >= 9,
        format!(
            "{quiet}/10 seeds (need 9); max S per seed: {}",
            per_seed(unbiased_runs.iter().map(|r| fmt_opt(r.scores.max_score)))
        ),
    ));

    let (mut bias_mcc, mut other_mcc) = (Vec::new(), Vec::new());
    for r in &biased_runs {
        let (b, o) = r.correlations.mcc_by_group();
        bias_mcc.extend(b);
        other_mcc.extend(o);
    }
    let mwu = mann_whitney_u_one_sided(&bias_mcc, &other_mcc);
    let (pass, detail) = match &mwu {
        Ok(u) => (
            u.p_value < 0.05,
            format!(
                "p = {:.3e} (need < 0.05); {} bias pairs, mean |MCC| {:.3}; {} other pairs, mean |MCC| {:.3}",
                u.p_value,
                bias_mcc.len(),
                mean(&bias_mcc),
                other_mcc.len(),
                mean(&other_mcc)
            ),
        ),
        Err(e) => (false, format!("no test: {e}")),
    };
    checks.push(Check::new("mcc_bias_vs_other_pairs", pass, detail));

    let wins = biased_runs
        .iter()
        .filter(|r| r.mitigation.ablation_mean_worst_group.is_some_and(|a| r.mitigation.suppressed.worst_group_acc > a))
        .count();
    checks.push(Check::new(
        "mitigation_beats_ablation",
        wins >= 6,
        format!(
            "{wins}/10 seeds (need 6); per seed |B| suppressed/ablation-mean/base worst-group: {}",
            per_seed(biased_runs.iter().map(|r| format!(
                "{}:{:.3}/{}/{:.3}",
                r.mitigation.bias_set.len(),
                r.mitigation.suppressed.worst_group_acc,
                fmt_opt(r.mitigation.ablation_mean_worst_group),
                r.mitigation.base.worst_group_acc
            )))
        ),
    ));

    checks.push(Check::new(
        "experiment_runtime",
        experiment <= RUNTIME_BUDGET,
        format!(
            "20 seed runs (10 biased, 10 unbiased) in {:.0}s on {} thread(s) (budget 900s)",
            experiment.as_secs_f64(),
            rayon::current_num_threads()
        ),
    ));

    checks.push(determinism_check(&scratch.path().join("biased/seed0"), scratch.path()));

    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        checks.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 && std::env::var_os("BIASPROBE_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}
