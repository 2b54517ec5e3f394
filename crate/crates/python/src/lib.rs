use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use duet::arena::{
    default_scripts, generate_dataset, oracle_probe, read_dataset, subsample, to_batch, write_dataset,
    ArenaConfig, Dataset,
};
use duet::autodiff::{load_checkpoint, save_checkpoint, ModelParams, Tape, Tensor};
use duet::harness::{
    check_compatible, evaluate, export_attention, gradcheck_cmd, train as train_run, GradcheckConfig,
    RunConfig,
};
use duet::mac::{mac_loss as mac_terms, MacConfig};
use duet::model::{forward_model, init_params, predict, PathKind, PathOutputs};
use duet::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::ZeroNorm(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn run_config(toml: Option<&str>) -> PyResult<RunConfig> {
    match toml {
        Some(text) => RunConfig::from_toml(text).map_err(py_err),
        None => Ok(RunConfig::default()),
    }
}

/// A split of the synthetic benchmark.
#[pyclass(name = "Dataset", module = "pyduet", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Returns `(train, test)`.
    #[staticmethod]
    #[pyo3(signature = (episodes_per_class = 200, noise = 0.1, seed = 7, frames = 3))]
    fn generate(episodes_per_class: usize, noise: f64, seed: u64, frames: usize) -> PyResult<(Self, Self)> {
        let cfg = ArenaConfig {
            episodes_per_class,
            noise,
            seed,
            frames,
            ..ArenaConfig::default()
        };
        let (train, test) = generate_dataset(&cfg, &default_scripts()).map_err(py_err)?;
        Ok((PyDataset { inner: train }, PyDataset { inner: test }))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: read_dataset(&path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_dataset(&self.inner, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.episodes.len()
    }

    #[getter]
    fn header(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.header)
    }

    fn group_labels(&self) -> Vec<usize> {
        self.inner.group_labels()
    }

    /// `(features, centers, scene, group_label, action_labels)` with the
    /// arrays flattened row-major.
    #[allow(clippy::type_complexity)]
    fn episode(&self, index: usize) -> PyResult<(Vec<f32>, Vec<f32>, Vec<f32>, u16, Vec<u16>)> {
        let e = self
            .inner
            .episodes
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("episode {index} out of range")))?;
        Ok((e.features.clone(), e.centers.clone(), e.scene.clone(), e.group_label, e.action_labels.clone()))
    }

    /// Indices of the nested stratified subset for `ratio`.
    #[pyo3(signature = (ratio, seed = 0))]
    fn subsample(&self, ratio: f64, seed: u64) -> PyResult<Vec<usize>> {
        subsample(&self.inner.group_labels(), ratio, seed).map_err(py_err)
    }

    fn oracle_probe(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let report = oracle_probe(&self.inner, &default_scripts()).map_err(py_err)?;
        to_py(py, &report)
    }
}

/// Model parameters together with the run configuration they belong to.
#[pyclass(name = "Model", module = "pyduet")]
struct PyModel {
    params: ModelParams,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    /// Fresh parameters for a TOML run configuration (defaults when omitted).
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let config = run_config(config)?;
        let params = init_params(&config.model, seed).map_err(py_err)?;
        Ok(PyModel { params, config })
    }

    #[staticmethod]
    #[pyo3(signature = (path, config = None))]
    fn load(path: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let config = run_config(config)?;
        let params = load_checkpoint(&path).map_err(py_err)?;
        check_compatible(&config.model, &params).map_err(py_err)?;
        Ok(PyModel { params, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.params, &path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> String {
        self.config.to_toml()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.names().map(str::to_string).collect()
    }

    fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Test-split metrics and confusion matrix.
    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset) -> PyResult<Py<PyAny>> {
        let ev = evaluate(&self.params, &self.config, &dataset.inner, 0).map_err(py_err)?;
        to_py(py, &serde_json::json!({ "metrics": ev.record, "confusion": ev.confusion }))
    }

    /// Group classes and per-actor action classes for the given episodes.
    fn predict(&self, dataset: &PyDataset, indices: Vec<usize>) -> PyResult<(Vec<usize>, Vec<usize>)> {
        let ds = &dataset.inner;
        let eps = indices
            .iter()
            .map(|&i| ds.episodes.get(i).ok_or_else(|| PyIndexError::new_err(format!("episode {i} out of range"))))
            .collect::<PyResult<Vec<_>>>()?;
        let batch = to_batch(&ds.header, &eps).map_err(py_err)?;
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let out = forward_model(&mut tape, &batch, &self.config.model, &b).map_err(py_err)?;
        Ok(predict(&tape, &out.predictions))
    }

    /// Attention weights of every unit for one episode.
    fn attention(&self, py: Python<'_>, dataset: &PyDataset, index: usize) -> PyResult<Py<PyAny>> {
        let traces = export_attention(&self.params, &self.config, &dataset.inner, index).map_err(py_err)?;
        to_py(py, &traces)
    }
}

/// Trains from a seeded initialization. Returns the model and the final
/// test record (None without a test split).
#[pyfunction]
#[pyo3(signature = (train, config = None, test = None, out = None))]
fn train(
    py: Python<'_>,
    train: &PyDataset,
    config: Option<&str>,
    test: Option<&PyDataset>,
    out: Option<PathBuf>,
) -> PyResult<(PyModel, Option<Py<PyAny>>)> {
    let config = run_config(config)?;
    let outcome = py
        .detach(|| train_run(&config, &train.inner, test.map(|t| &t.inner), out.as_deref()))
        .map_err(py_err)?;
    let record = outcome.final_eval().map(|e| to_py(py, &e.record)).transpose()?;
    Ok((
        PyModel {
            params: outcome.params,
            config,
        },
        record,
    ))
}

/// Finite-difference check of the full loss on a small model.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Py<PyAny>> {
    let cfg = GradcheckConfig {
        seed,
        ..GradcheckConfig::default()
    };
    let report = py.detach(|| gradcheck_cmd(&cfg, None)).map_err(py_err)?;
    to_py(
        py,
        &serde_json::json!({
            "passed": report.passed(),
            "max_rel_err": report.max_rel_err(),
            "tensors": report.tensors,
        }),
    )
}

/// Contrastive loss terms between two `[B, K, N, C]` path outputs given as
/// flat row-major lists. Video representations are frame means.
#[pyfunction]
#[pyo3(signature = (st, ts, shape, weights = (1.0, 1.0, 1.0)))]
fn mac_loss(
    py: Python<'_>,
    st: Vec<f64>,
    ts: Vec<f64>,
    shape: [usize; 4],
    weights: (f64, f64, f64),
) -> PyResult<Py<PyAny>> {
    let cfg = MacConfig {
        lambda_ff: weights.0,
        lambda_fv: weights.1,
        lambda_vv: weights.2,
    };
    let mut tape = Tape::new();
    let mut path = |data: Vec<f64>, kind| -> duet::Result<PathOutputs> {
        let enhanced = tape.constant(Tensor::new(&shape, data)?);
        let video = tape.mean_axis(enhanced, 1)?;
        Ok(PathOutputs {
            path: kind,
            enhanced,
            video,
            traces: Vec::new(),
        })
    };
    let a = path(st, PathKind::ST).map_err(py_err)?;
    let b = path(ts, PathKind::TS).map_err(py_err)?;
    let terms = mac_terms(&mut tape, &a, &b, &cfg).map_err(py_err)?;
    to_py(py, &terms.breakdown(&tape, shape[0]))
}

#[pymodule]
fn pyduet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(mac_loss, m)?)?;
    Ok(())
}
