//! Python bindings: dataset generation, training, evaluation and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mammodg::metrics::{self, EvalRecord};
use mammodg::synthdata::{self, DatasetManifest, GenConfig, Split, MANIFEST_FILE};
use mammodg::trainkit::{self, ImageCache, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_records(scores: &[f64], labels: &[u8], domains: Option<Vec<usize>>) -> PyResult<Vec<EvalRecord>> {
    let domains = domains.unwrap_or_else(|| vec![0; scores.len()]);
    if labels.len() != scores.len() || domains.len() != scores.len() {
        return Err(PyValueError::new_err("scores, labels and domains must have the same length"));
    }
    Ok(scores
        .iter()
        .zip(labels)
        .zip(&domains)
        .enumerate()
        .map(|(i, ((&score, &label), &domain_id))| EvalRecord { sample_id: i.to_string(), domain_id, score, label })
        .collect())
}

/// Rank-based AUC with tie averaging.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auc(&to_records(&scores, &labels, None)?).map_err(value_err)
}

/// Per-domain, average and overall metrics as a JSON string.
#[pyfunction]
#[pyo3(signature = (scores, labels, domains=None))]
fn evaluate_json(scores: Vec<f64>, labels: Vec<u8>, domains: Option<Vec<usize>>) -> PyResult<String> {
    Ok(metrics::evaluate(&to_records(&scores, &labels, domains)?).map_err(value_err)?.to_json())
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, domains=4, per_domain=400, malignant_frac=0.25, size=128, seed=42))]
fn generate_dataset(out: PathBuf, domains: usize, per_domain: usize, malignant_frac: f64, size: usize, seed: u64) -> PyResult<String> {
    let cfg = GenConfig::new(domains, per_domain, malignant_frac, size, seed);
    synthdata::generate_dataset(&cfg, &out).map_err(value_err)?;
    Ok(out.join(MANIFEST_FILE).display().to_string())
}

/// Learning rate of the step schedule at `epoch`.
#[pyfunction]
fn lr_at_epoch(base_lr: f64, epoch: usize) -> f64 {
    trainkit::lr_at_epoch(base_lr, epoch)
}

/// Trains from a JSON config (missing keys take defaults) and returns
/// `(best_epoch, seen_auc, unseen_auc)` of the best checkpoint.
#[pyfunction]
#[pyo3(signature = (data, out, config_json="{}"))]
fn train(py: Python<'_>, data: PathBuf, out: PathBuf, config_json: &str) -> PyResult<(usize, Option<f64>, Option<f64>)> {
    let cfg = TrainConfig::from_json(config_json).map_err(value_err)?;
    let manifest = DatasetManifest::read(&data.join(MANIFEST_FILE)).map_err(value_err)?;
    let outcome = py.detach(|| trainkit::train(&cfg, &manifest, &out)).map_err(runtime_err)?;
    let m = outcome.best.metrics.as_ref();
    Ok((outcome.best.epoch, m.and_then(|m| m.seen_auc), m.and_then(|m| m.unseen_auc)))
}

/// Breast-level `(sample_id, domain_id, score, label)` rows of one split.
#[pyfunction]
#[pyo3(signature = (ckpt, data, split="test"))]
fn predict(py: Python<'_>, ckpt: PathBuf, data: PathBuf, split: &str) -> PyResult<Vec<(String, usize, f64, u8)>> {
    let split = Split::parse(split).ok_or_else(|| PyValueError::new_err(format!("unknown split '{split}'")))?;
    let records = py
        .detach(|| -> Result<Vec<EvalRecord>, trainkit::TrainError> {
            let model = trainkit::load_checkpoint(&ckpt)?.model()?;
            let manifest = DatasetManifest::read(&data.join(MANIFEST_FILE))?;
            let cache = ImageCache::load(&manifest)?;
            Ok(trainkit::evaluate_model(&model, &manifest, &cache, split)?.1)
        })
        .map_err(runtime_err)?;
    Ok(records.into_iter().map(|r| (r.sample_id, r.domain_id, r.score, r.label)).collect())
}

/// Runs the command line with `args` (without the program name) and returns
/// `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv: Vec<String> = std::iter::once("mammodg".to_string()).chain(args).collect();
    let code = py.detach(|| mammodg::cli::run(argv, &mut out, &mut err));
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

#[pymodule]
pub fn mammodg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_json, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_epoch, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
