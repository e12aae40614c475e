//! Python bindings: experiment runner, RQ-VAE SIDs and SID-level hit rate.

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use genrec_core::config::KeyValues;
use genrec_core::evaluation::metrics::hr_at_k_sids;
use genrec_core::evaluation::{metrics_csv, run_experiment, ExperimentConfig};
use genrec_core::quantizer::{assign_catalog, train_rqvae, RqVaeConfig};
use genrec_core::ItemId;

fn err(e: genrec_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Runs the configured experiment; `config` is `key=value` text.
/// Returns the metrics CSV.
#[pyfunction]
#[pyo3(signature = (config = ""))]
fn experiment(py: Python<'_>, config: &str) -> PyResult<String> {
    let kv = KeyValues::parse(config, "<python>").map_err(err)?;
    let cfg = ExperimentConfig::from_kv(&kv).map_err(err)?;
    let reports = py.allow_threads(|| run_experiment(&cfg)).map_err(err)?;
    Ok(metrics_csv(&reports))
}

/// Trains an RQ-VAE on `embeddings` (rows are items) and returns each row's SID.
#[pyfunction]
#[pyo3(signature = (embeddings, codebook_size = 256, levels = 4, epochs = 10, seed = 0))]
fn semantic_ids(
    py: Python<'_>,
    embeddings: Vec<Vec<f64>>,
    codebook_size: usize,
    levels: usize,
    epochs: usize,
    seed: u64,
) -> PyResult<Vec<Vec<u16>>> {
    let dim = embeddings.first().map_or(0, Vec::len);
    if embeddings.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    let n = embeddings.len();
    let m = Array2::from_shape_vec((n, dim), embeddings.concat()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cfg = RqVaeConfig {
        codebook_size,
        levels,
        epochs,
        seed,
        ..RqVaeConfig::default()
    };
    let ids: Vec<ItemId> = (0..n as ItemId).collect();
    let sids = py
        .allow_threads(|| {
            let (model, _) = train_rqvae(&m, &cfg)?;
            assign_catalog(&model, &m, &ids)
        })
        .map_err(err)?;
    Ok(sids.sids.into_iter().map(|(_, s)| s.0).collect())
}

/// 1 if any of the first `k` predicted SIDs equals `target`, else 0.
#[pyfunction]
fn hit_rate(predictions: Vec<Vec<u16>>, target: Vec<u16>, k: usize) -> PyResult<u8> {
    let p: Vec<&[u16]> = predictions.iter().map(Vec::as_slice).collect();
    hr_at_k_sids(&p, &target, k).map_err(err)
}

#[pymodule]
fn genrec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(experiment, m)?)?;
    m.add_function(wrap_pyfunction!(semantic_ids, m)?)?;
    m.add_function(wrap_pyfunction!(hit_rate, m)?)?;
    Ok(())
}
