//! Python bindings. Structured results (path records, verification outcomes)
//! cross the boundary as JSON strings or plain tuples.

use dessilbi::config::parse_with_overrides;
use dessilbi::harness::{self, Session};
use dessilbi::optim::AlphaSchedule;
use dessilbi::path::PathRecord;
use dessilbi::{Error, GroupScheme, Grouping, HyperParams, Penalty, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

create_exception!(dessilbi_py, DessilbiError, PyRuntimeError, "Training or I/O failure inside dessilbi.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Grouping(_) | Error::Config { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => DessilbiError::new_err(other.to_string()),
    }
}

fn scheme(name: &str) -> PyResult<GroupScheme> {
    match name {
        "per_element" => Ok(GroupScheme::PerElement),
        "per_filter" => Ok(GroupScheme::PerFilter),
        other => Err(PyValueError::new_err(format!("unknown scheme {other:?}; use \"per_element\" or \"per_filter\""))),
    }
}

fn penalty(shape: &[usize], lam: f64, scheme_name: &str) -> PyResult<Penalty> {
    let grouping = Grouping::new(scheme(scheme_name)?, shape).map_err(to_py)?;
    Penalty::new(grouping, lam).map_err(to_py)
}

fn json<T: serde::Serialize + ?Sized>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| DessilbiError::new_err(e.to_string()))
}

/// `kappa * Prox_{lam Omega}(v)` for a flat tensor of the given shape.
#[pyfunction]
#[pyo3(signature = (v, shape, lam, kappa = 1.0, scheme = "per_element"))]
fn prox(v: Vec<f64>, shape: Vec<usize>, lam: f64, kappa: f64, scheme: &str) -> PyResult<Vec<f64>> {
    let p = penalty(&shape, lam, scheme)?;
    let t = Tensor::new(shape, v).map_err(to_py)?;
    Ok(p.prox(&t, kappa).map_err(to_py)?.into_data())
}

/// Group-lasso penalty `lam * sum_g |gamma_g|_2`.
#[pyfunction]
#[pyo3(signature = (gamma, shape, lam, scheme = "per_element"))]
fn penalty_value(gamma: Vec<f64>, shape: Vec<usize>, lam: f64, scheme: &str) -> PyResult<f64> {
    let p = penalty(&shape, lam, scheme)?;
    p.value(&Tensor::new(shape, gamma).map_err(to_py)?).map_err(to_py)
}

#[pyfunction]
fn stepsize_bound(lip: f64, kappa: f64, nu: f64) -> PyResult<f64> {
    let hp = HyperParams { kappa, nu, ..HyperParams::default() };
    dessilbi::stepsize_bound(lip, &hp).map_err(to_py)
}

/// Step size at `epoch` under `alpha * factor^(epoch // every)`.
#[pyfunction]
#[pyo3(signature = (epoch, alpha = 0.1, every = 30, factor = 0.1))]
fn lr_schedule(epoch: usize, alpha: f64, every: usize, factor: f64) -> f64 {
    AlphaSchedule::StepDecay { initial: alpha, every, factor }.at(epoch)
}

/// Fraction of exactly nonzero entries.
#[pyfunction]
fn sparsity(values: Vec<f64>) -> f64 {
    dessilbi::path::sparsity(&Tensor::from_vec(values))
}

/// Runs the numerical self-checks; returns `(name, passed, detail)` per suite.
#[pyfunction]
#[pyo3(signature = (seed = 1))]
fn verify(py: Python<'_>, seed: u64) -> Vec<(String, bool, String)> {
    py.detach(|| dessilbi::verify::run_all(seed))
        .into_iter()
        .map(|o| (o.name.to_string(), o.passed, o.detail))
        .collect()
}

/// Trains from a TOML config and returns the path records as a JSON array.
#[pyfunction]
#[pyo3(signature = (config, overrides = Vec::new()))]
fn train(py: Python<'_>, config: &str, overrides: Vec<String>) -> PyResult<String> {
    let cfg = parse_with_overrides(config, &overrides).map_err(to_py)?;
    let run = py.detach(|| harness::train(&cfg, None)).map_err(to_py)?;
    json(&run.records)
}

/// Interactive training: one epoch per call, state inspectable in between.
#[pyclass(name = "Session")]
struct PySession {
    inner: Session,
}

impl PySession {
    fn coupled(&self, layer: usize) -> PyResult<&dessilbi::optim::Coupled> {
        self.inner
            .state
            .params
            .iter()
            .find(|p| p.id.layer == layer && p.id.is_weight())
            .and_then(|p| p.coupled.as_ref())
            .ok_or_else(|| PyValueError::new_err(format!("layer {layer} has no split weight")))
    }
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (config, overrides = Vec::new()))]
    fn new(config: &str, overrides: Vec<String>) -> PyResult<Self> {
        let cfg = parse_with_overrides(config, &overrides).map_err(to_py)?;
        Ok(Self { inner: Session::new(cfg).map_err(to_py)? })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch()
    }

    /// Record of the current iterate as JSON.
    fn record(&self) -> PyResult<String> {
        json(&self.inner.record().map_err(to_py)?)
    }

    /// Trains one epoch; returns its record as JSON.
    fn run_epoch(&mut self, py: Python<'_>) -> PyResult<String> {
        let record = py.detach(|| self.inner.run_epoch()).map_err(to_py)?;
        json(&record)
    }

    /// Trains `epochs` more epochs; returns their records as a JSON array.
    fn run(&mut self, py: Python<'_>, epochs: usize) -> PyResult<String> {
        let records = py
            .detach(|| (0..epochs).map(|_| self.inner.run_epoch()).collect::<Result<Vec<PathRecord>, Error>>())
            .map_err(to_py)?;
        json(&records)
    }

    /// Nonzero fraction of `Gamma` over all split weights.
    fn sparsity(&self) -> PyResult<f64> {
        Ok(self.inner.record().map_err(to_py)?.overall_sparsity())
    }

    /// Flat `Gamma` of the weight in `layer`.
    fn gamma(&self, layer: usize) -> PyResult<Vec<f64>> {
        Ok(self.coupled(layer)?.gamma.data().to_vec())
    }

    /// Flat weight tensor of `layer` and its shape.
    fn weight(&self, layer: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let id = dessilbi::ParamId { layer, slot: 0 };
        let layers = &self.inner.state.net.layers;
        if layers.get(layer).is_none_or(|l| l.params.is_empty()) {
            return Err(PyValueError::new_err(format!("layer {layer} has no weight")));
        }
        let w = self.inner.state.net.param(id);
        Ok((w.data().to_vec(), w.shape().to_vec()))
    }

    /// Largest dual-ball violation over split weights; at most about 1e-9 along any run.
    fn max_dual_excess(&self) -> f64 {
        self.inner.state.max_dual_excess(self.inner.cfg.optimizer.kappa)
    }
}

#[pymodule]
pub fn dessilbi_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DessilbiError", m.py().get_type::<DessilbiError>())?;
    m.add_function(wrap_pyfunction!(prox, m)?)?;
    m.add_function(wrap_pyfunction!(penalty_value, m)?)?;
    m.add_function(wrap_pyfunction!(stepsize_bound, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PySession>()?;
    Ok(())
}
