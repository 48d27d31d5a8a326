//! Python bindings: parameter records and their formulas, configs, the round
//! protocol and the experiment runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use fedssl::config::ExperimentConfig;
use fedssl::fed::{FedError, Federation as CoreFederation};
use fedssl::params::{self, NamedParams as CoreParams, ParamsError, ENCODER};
use fedssl::runner::{self, RunError};

fn params_err(e: ParamsError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: RunError) -> PyErr {
    let msg = format!("{}: {e}", e.category());
    match e {
        RunError::Io { .. } => PyOSError::new_err(msg),
        RunError::Fed(_) | RunError::Eval(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn fed_err(e: FedError) -> PyErr {
    run_err(e.into())
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse(config: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml_str(config).map_err(|e| run_err(e.into()))
}

/// Named parameter groups, e.g. `{"encoder": [...], "predictor": [...]}`.
#[pyclass(module = "fedssl", from_py_object)]
#[derive(Clone)]
struct NamedParams {
    inner: CoreParams,
}

#[pymethods]
impl NamedParams {
    #[new]
    fn new(groups: BTreeMap<String, Vec<f64>>) -> Self {
        Self { inner: CoreParams::from_groups(groups) }
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        CoreParams::from_bytes(data).map(|inner| Self { inner }).map_err(params_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn to_dict(&self) -> BTreeMap<String, Vec<f64>> {
        self.inner.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
    }

    fn group_names(&self) -> Vec<String> {
        self.inner.group_names().map(str::to_string).collect()
    }

    fn total_len(&self) -> usize {
        self.inner.total_len()
    }

    fn bitwise_eq(&self, other: &NamedParams) -> bool {
        self.inner.bitwise_eq(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.group_names().count()
    }

    fn __repr__(&self) -> String {
        let groups: Vec<String> = self.inner.iter().map(|(k, v)| format!("{k}: {}", v.len())).collect();
        format!("NamedParams({})", groups.join(", "))
    }
}

fn group_list(groups: Option<Vec<String>>) -> Vec<String> {
    groups.unwrap_or_else(|| vec![ENCODER.to_string()])
}

/// Sample-count weighted average of `[(params, weight), ...]`.
#[pyfunction]
fn weighted_average(entries: Vec<(NamedParams, f64)>) -> PyResult<NamedParams> {
    let refs: Vec<(&CoreParams, f64)> = entries.iter().map(|(p, w)| (&p.inner, *w)).collect();
    params::weighted_average(&refs).map(|inner| NamedParams { inner }).map_err(params_err)
}

/// `mu * local + (1 - mu) * global` on `groups` (default: encoder).
#[pyfunction]
#[pyo3(signature = (local, global_params, mu, groups=None))]
fn ema_blend(local: &NamedParams, global_params: &NamedParams, mu: f64, groups: Option<Vec<String>>) -> PyResult<NamedParams> {
    let groups = group_list(groups);
    let refs: Vec<&str> = groups.iter().map(String::as_str).collect();
    params::ema_blend(&local.inner, &global_params.inner, mu, &refs)
        .map(|inner| NamedParams { inner })
        .map_err(params_err)
}

/// L2 distance over `groups` (default: encoder).
#[pyfunction]
#[pyo3(signature = (a, b, groups=None))]
fn divergence(a: &NamedParams, b: &NamedParams, groups: Option<Vec<String>>) -> PyResult<f64> {
    let groups = group_list(groups);
    let refs: Vec<&str> = groups.iter().map(String::as_str).collect();
    params::divergence(&a.inner, &b.inner, &refs).map_err(params_err)
}

#[pyfunction]
fn compute_mu(lam: f64, div: f64) -> PyResult<f64> {
    params::compute_mu(lam, div).map_err(params_err)
}

#[pyfunction]
fn autoscale_lambda(global_params: &NamedParams, local: &NamedParams, tau: f64) -> PyResult<f64> {
    params::autoscale_lambda(&global_params.inner, &local.inner, tau).map_err(params_err)
}

/// Default config as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().finish().expect("defaults are valid").to_toml_string()
}

/// Validates a TOML config and returns it with all defaults filled in.
#[pyfunction]
fn parse_config(text: &str) -> PyResult<String> {
    Ok(parse(text)?.to_toml_string())
}

/// Round-by-round access to the protocol.
#[pyclass(module = "fedssl", unsendable)]
struct Federation {
    inner: CoreFederation,
}

#[pymethods]
impl Federation {
    #[new]
    fn new(config: &str) -> PyResult<Self> {
        let cfg = parse(config)?;
        let data = runner::prepare_data(&cfg).map_err(run_err)?;
        let fed_cfg = cfg.fed_config().map_err(|e| run_err(e.into()))?;
        let inner = CoreFederation::new(fed_cfg, data.client_data()).map_err(fed_err)?;
        Ok(Self { inner })
    }

    /// Runs the next round and returns its record.
    fn run_round<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let rec = self.inner.run_round().map_err(fed_err)?;
        json_to_py(py, &rec)
    }

    #[getter]
    fn round(&self) -> usize {
        self.inner.server.round
    }

    #[getter]
    fn num_clients(&self) -> usize {
        self.inner.server.clients.len()
    }

    fn global_params(&self) -> NamedParams {
        NamedParams { inner: self.inner.server.global.clone() }
    }

    /// Online encoder and predictor of client `k`.
    fn client_params(&self, k: usize) -> PyResult<NamedParams> {
        let c = self
            .inner
            .server
            .clients
            .get(k)
            .ok_or_else(|| PyValueError::new_err(format!("no client {k}")))?;
        Ok(NamedParams { inner: c.nets.online_params() })
    }

    /// `lambda_k` of client `k`, if set.
    fn client_lambda(&self, k: usize) -> PyResult<Option<f64>> {
        self.inner
            .server
            .clients
            .get(k)
            .map(|c| c.lambda_k)
            .ok_or_else(|| PyValueError::new_err(format!("no client {k}")))
    }
}

/// Runs an experiment in memory; returns round records and the final evaluation.
#[pyfunction]
fn execute<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse(config)?;
    let out = runner::execute(&cfg).map_err(run_err)?;
    let value = serde_json::json!({
        "records": out.records,
        "final": out.final_eval,
        "report": out.report,
    });
    json_to_py(py, &value)
}

/// Runs an experiment and writes its artifacts into `out_dir`.
#[pyfunction]
fn run<'py>(py: Python<'py>, config: &str, out_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse(config)?;
    let summary = runner::run(&cfg, &out_dir).map_err(run_err)?;
    json_to_py(py, &summary)
}

#[pyfunction]
fn compare<'py>(py: Python<'py>, run_dirs: Vec<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let rows = runner::compare(&run_dirs).map_err(run_err)?;
    json_to_py(py, &rows)
}

#[pyfunction]
#[pyo3(signature = (run_dir, checkpoint=None))]
fn evaluate_checkpoint<'py>(py: Python<'py>, run_dir: PathBuf, checkpoint: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let report = runner::evaluate_checkpoint(&run_dir, checkpoint.as_deref().map(Path::new)).map_err(run_err)?;
    json_to_py(py, &report)
}

#[pymodule(name = "fedssl")]
fn fedssl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<NamedParams>()?;
    m.add_class::<Federation>()?;
    m.add_function(wrap_pyfunction!(weighted_average, m)?)?;
    m.add_function(wrap_pyfunction!(ema_blend, m)?)?;
    m.add_function(wrap_pyfunction!(divergence, m)?)?;
    m.add_function(wrap_pyfunction!(compute_mu, m)?)?;
    m.add_function(wrap_pyfunction!(autoscale_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(execute, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    Ok(())
}
