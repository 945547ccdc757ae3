//! Python bindings: dataset generation, the frozen classifier, the full audit
//! and the bundle audit, plus the numerical building blocks.

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use biasprobe::data::{
    generate, write_bundle as write_bundle_file, ActivationBundle, BiasMode, DatasetSpec, HeadParams, Sample, Split,
};
use biasprobe::linalg::{nmf as nmf_core, nnls as nnls_core, Matrix, NmfConfig};
use biasprobe::mitigate::EvalReport;
use biasprobe::model::{argmax, load_checkpoint, save_checkpoint, train, FrozenClassifier, TrainConfig};
use biasprobe::pipeline::{fit_banks, mitigate, score_and_merge, AuditConfig};
use biasprobe::probe;
use biasprobe::stats::{self, ContingencyTable2x2};
use biasprobe_cli::{commands, Context, RunConfig};

fn value_error<E: Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(value_error)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn parse_mode(mode: &str) -> PyResult<BiasMode> {
    match mode {
        "biased" => Ok(BiasMode::Biased),
        "unbiased" => Ok(BiasMode::Unbiased),
        "shifted" => Ok(BiasMode::Shifted),
        other => Err(PyValueError::new_err(format!("unknown bias mode {other:?}"))),
    }
}

fn parse_split(split: &str) -> PyResult<Split> {
    match split {
        "train" => Ok(Split::Train),
        "audit" => Ok(Split::Audit),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    }
}

/// Generated colored-digit samples of all three splits.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    samples: Vec<Sample>,
}

impl PyDataset {
    fn split(&self, split: &str) -> PyResult<Vec<Sample>> {
        let split = parse_split(split)?;
        Ok(self.samples.iter().filter(|s| s.split == split).cloned().collect())
    }

    fn sample(&self, index: usize) -> PyResult<&Sample> {
        self.samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("sample {index} out of range")))
    }
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (seed=0, n_train=10000, n_audit=10000, n_test=2000, rho=0.95, bias_mode="biased"))]
    fn generate(
        py: Python<'_>,
        seed: u64,
        n_train: usize,
        n_audit: usize,
        n_test: usize,
        rho: f64,
        bias_mode: &str,
    ) -> PyResult<Self> {
        let spec = DatasetSpec {
            seed,
            n_train,
            n_audit,
            n_test,
            rho,
            bias_mode: parse_mode(bias_mode)?,
            ..Default::default()
        };
        let samples = py.detach(|| generate(&spec)).map_err(value_error)?;
        Ok(Self { samples })
    }

    fn __len__(&self) -> usize {
        self.samples.len()
    }

    /// Labels of one split, or of every sample.
    #[pyo3(signature = (split=None))]
    fn labels(&self, split: Option<&str>) -> PyResult<Vec<usize>> {
        Ok(match split {
            Some(s) => self.split(s)?.iter().map(|s| s.label).collect(),
            None => self.samples.iter().map(|s| s.label).collect(),
        })
    }

    /// Color index per sample; `None` for neutral samples.
    #[pyo3(signature = (split=None))]
    fn bias_colors(&self, split: Option<&str>) -> PyResult<Vec<Option<usize>>> {
        Ok(match split {
            Some(s) => self.split(s)?.iter().map(|s| s.bias_color).collect(),
            None => self.samples.iter().map(|s| s.bias_color).collect(),
        })
    }

    /// Interleaved RGB pixels of sample `index`, row-major.
    fn image(&self, index: usize) -> PyResult<Vec<f32>> {
        Ok(self.sample(index)?.image.pixels.clone())
    }
}

/// A trained two-hidden-layer MLP with its linear head.
#[pyclass(name = "Classifier", frozen)]
struct PyClassifier {
    model: FrozenClassifier,
}

#[pymethods]
impl PyClassifier {
    /// Trains on the dataset's train split.
    #[staticmethod]
    #[pyo3(signature = (dataset, epochs=100, seed=0, hidden=vec![100, 100]))]
    fn train(py: Python<'_>, dataset: PyRef<'_, PyDataset>, epochs: usize, seed: u64, hidden: Vec<usize>) -> PyResult<Self> {
        let data = dataset.split("train")?;
        let classes = dataset.samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
        let cfg = TrainConfig {
            epochs,
            seed,
            hidden,
            ..Default::default()
        };
        let report = py.detach(|| train(&data, classes, &cfg)).map_err(value_error)?;
        Ok(Self { model: report.model })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            model: load_checkpoint(path).map_err(value_error)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.model, path).map_err(value_error)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.model.classes()
    }

    /// Representation width `p`.
    #[getter]
    fn width(&self) -> usize {
        self.model.representation_width()
    }

    fn predict(&self, dataset: PyRef<'_, PyDataset>, index: usize) -> PyResult<usize> {
        self.model.predict(&dataset.sample(index)?.image).map_err(value_error)
    }

    fn features(&self, dataset: PyRef<'_, PyDataset>, index: usize) -> PyResult<Vec<f64>> {
        self.model.features(&dataset.sample(index)?.image).map_err(value_error)
    }

    fn head_logits(&self, a: Vec<f64>) -> PyResult<Vec<f64>> {
        self.model.head_logits(&a).map_err(value_error)
    }

    fn head_gradient(&self, a: Vec<f64>, y: usize) -> PyResult<Vec<f64>> {
        self.model.head_gradient(&a, y).map_err(value_error)
    }

    fn probe_step(&self, a: Vec<f64>, y: usize, d: f64) -> PyResult<Vec<f64>> {
        probe::probe_step(&self.model, &a, y, d).map_err(value_error)
    }

    /// Accuracy, worst-class and worst-group accuracy on one split.
    #[pyo3(signature = (dataset, split="test"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: PyRef<'_, PyDataset>, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let samples = dataset.split(split)?;
        let predictions = samples
            .iter()
            .map(|s| self.model.predict(&s.image))
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_error)?;
        let report = biasprobe::mitigate::evaluate_predictions(&samples, &predictions).map_err(value_error)?;
        eval_dict(py, &report)
    }
}

fn eval_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("worst_class_acc", r.worst_class_acc)?;
    d.set_item("worst_group_acc", r.worst_group_acc)?;
    Ok(d)
}

/// Concept banks on the audit split, bias scores, the merged bank and
/// suppression against random ablations on the test split.
#[pyfunction]
#[pyo3(signature = (model, dataset, seed=0, r=8, tau=0.55, d=2e4))]
fn audit<'py>(
    py: Python<'py>,
    model: PyRef<'_, PyClassifier>,
    dataset: PyRef<'_, PyDataset>,
    seed: u64,
    r: usize,
    tau: f64,
    d: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = AuditConfig {
        r,
        ..Default::default()
    };
    cfg.probe.tau = tau;
    cfg.probe.d = d;
    let (audit_set, test) = (dataset.split("audit")?, dataset.split("test")?);
    let m = &model.model;
    let (scored, mitigation) = py
        .detach(|| {
            let banks = fit_banks(m, &audit_set, &cfg, seed)?;
            let scored = score_and_merge(m, &audit_set, &banks.banks, &cfg)?;
            let mitigation = mitigate(m, &scored.merged, &test, &cfg, seed)?;
            Ok::<_, biasprobe::pipeline::PipelineError>((scored, mitigation))
        })
        .map_err(value_error)?;

    let out = PyDict::new(py);
    let scores = PyList::empty(py);
    for row in &scored.identification.table.rows {
        let item = PyDict::new(py);
        item.set_item("class", row.class)?;
        item.set_item("concept", row.concept)?;
        item.set_item("e_fn", row.e_fn)?;
        item.set_item("e_fp", row.e_fp)?;
        item.set_item("score", row.score)?;
        item.set_item("is_bias", row.is_bias)?;
        scores.append(item)?;
    }
    out.set_item("scores", scores)?;
    out.set_item("max_score", scored.identification.table.max_score())?;
    out.set_item("merged_concepts", scored.merged.len())?;
    out.set_item("bias_set", mitigation.bias_set.clone())?;
    out.set_item("base", eval_dict(py, &mitigation.base)?)?;
    out.set_item("suppressed", eval_dict(py, &mitigation.suppressed)?)?;
    out.set_item("ablation_mean_worst_group", mitigation.ablation_mean_worst_group())?;
    Ok(out)
}

/// Writes an activation bundle. Predictions are the argmax of `logits`.
#[pyfunction]
#[pyo3(signature = (path, activations, logits, labels, bias_attributes=None, head_weight=None, head_bias=None, layer_name="", model_id=""))]
#[allow(clippy::too_many_arguments)]
fn write_bundle(
    path: PathBuf,
    activations: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
    labels: Vec<usize>,
    bias_attributes: Option<Vec<usize>>,
    head_weight: Option<Vec<Vec<f64>>>,
    head_bias: Option<Vec<f64>>,
    layer_name: &str,
    model_id: &str,
) -> PyResult<()> {
    let head = match (head_weight, head_bias) {
        (Some(w), Some(b)) => Some(HeadParams {
            weight: matrix(&w)?,
            bias: b,
        }),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("head_weight and head_bias go together")),
    };
    let bundle = ActivationBundle {
        activations: matrix(&activations)?,
        predictions: logits.iter().map(|l| argmax(l)).collect(),
        logits: matrix(&logits)?,
        labels,
        bias_attributes,
        layer_name: layer_name.into(),
        model_id: model_id.into(),
        head,
    };
    write_bundle_file(&bundle, path).map_err(value_error)
}

/// Audits a bundle and writes `bundle_scores.csv` and `bundle_scores.json`
/// into `out_dir`. `config` is the text of a run-config TOML file.
#[pyfunction]
#[pyo3(signature = (bundle_path, out_dir, head_path=None, config=None))]
fn audit_bundle(
    py: Python<'_>,
    bundle_path: PathBuf,
    out_dir: PathBuf,
    head_path: Option<PathBuf>,
    config: Option<&str>,
) -> PyResult<()> {
    let cfg = match config {
        Some(text) => RunConfig::from_toml(text).map_err(value_error)?,
        None => RunConfig::default(),
    };
    std::fs::create_dir_all(&out_dir).map_err(value_error)?;
    let ctx = Context::new(cfg, out_dir).map_err(value_error)?;
    py.detach(|| commands::audit_bundle(&ctx, &bundle_path, head_path.as_deref()))
        .map_err(value_error)
}

/// `argmin ‖A x − b‖` over `x ≥ 0`; `a` is given as rows.
#[pyfunction]
fn nnls(a: Vec<Vec<f64>>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    nnls_core(&matrix(&a)?, &b).map_err(value_error)
}

/// Rank-`rank` factorization `A ≈ U Wᵀ`; returns `(U, W, objective_trace)`.
#[pyfunction]
#[pyo3(signature = (a, rank, seed=0))]
fn nmf(a: Vec<Vec<f64>>, rank: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    let result = nmf_core(&matrix(&a)?, &NmfConfig::new(rank, seed)).map_err(value_error)?;
    Ok((rows(&result.coefficients), rows(&result.concepts), result.objective_trace))
}

#[pyfunction]
fn mcc(n11: u64, n10: u64, n01: u64, n00: u64) -> f64 {
    stats::mcc(&ContingencyTable2x2::new(n11, n10, n01, n00))
}

/// `(statistic, p_value)` of the 2×2 independence test.
#[pyfunction]
fn chi2_independence(n11: u64, n10: u64, n01: u64, n00: u64) -> (f64, f64) {
    let r = stats::chi2_independence(&ContingencyTable2x2::new(n11, n10, n01, n00));
    (r.statistic, r.p_value)
}

/// One-sided test that `greater` stochastically exceeds `less`:
/// `(u, p_value, exact)`.
#[pyfunction]
fn mann_whitney_u(greater: Vec<f64>, less: Vec<f64>) -> PyResult<(f64, f64, bool)> {
    let r = stats::mann_whitney_u_one_sided(&greater, &less).map_err(value_error)?;
    Ok((r.u, r.p_value, r.exact))
}

#[pyfunction]
#[pyo3(signature = (e_fn=None, e_fp=None))]
fn bias_score(e_fn: Option<f64>, e_fp: Option<f64>) -> Option<f64> {
    probe::bias_score(e_fn, e_fp)
}

#[pymodule]
fn biasprobe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(write_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(audit_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(nnls, m)?)?;
    m.add_function(wrap_pyfunction!(nmf, m)?)?;
    m.add_function(wrap_pyfunction!(mcc, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_independence, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney_u, m)?)?;
    m.add_function(wrap_pyfunction!(bias_score, m)?)?;
    Ok(())
}
