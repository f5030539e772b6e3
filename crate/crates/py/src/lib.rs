//! Python bindings: model specs, masks, pruning scores, aggregation and the
//! round-by-round simulator.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use fedpai::config::parse_config;
use fedpai::data::{partition_dirichlet, partition_iid, Dataset};
use fedpai::federation;
use fedpai::metrics;
use fedpai::pruning::{self, ImportanceScore};
use fedpai::tensor::Tensor;
use fedpai::{Error, ModelState};

fn to_py(e: Error) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "ModelSpec", module = "fedpai_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModelSpec {
    inner: fedpai::ModelSpec,
}

#[pymethods]
impl PyModelSpec {
    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden, num_classes))]
    fn mlp(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self {
            inner: fedpai::ModelSpec::mlp(input_dim, &hidden, num_classes),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (in_channels, side, channels, num_classes, kernel_size=3))]
    fn cnn(
        in_channels: usize,
        side: usize,
        channels: Vec<usize>,
        num_classes: usize,
        kernel_size: usize,
    ) -> Self {
        Self {
            inner: fedpai::ModelSpec::cnn(in_channels, side, &channels, kernel_size, num_classes),
        }
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn num_prunable(&self) -> usize {
        self.inner.num_prunable()
    }

    /// Multiply-accumulates of one forward pass.
    fn flops(&self) -> PyResult<u64> {
        metrics::flops_forward(&self.inner).map_err(to_py)
    }

    /// Freshly initialized parameters.
    fn init(&self, seed: u64) -> PyResult<Vec<f64>> {
        Ok(fedpai::nn::init_weights(&self.inner, seed)
            .map_err(to_py)?
            .params)
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelSpec(params={}, prunable={})",
            self.inner.num_params(),
            self.inner.num_prunable()
        )
    }
}

impl PyModelSpec {
    fn state(&self, params: Vec<f64>) -> PyResult<ModelState> {
        ModelState::new(params, self.inner.layout()).map_err(to_py)
    }

    fn batch(&self, x: Vec<Vec<f64>>, y: &[usize]) -> PyResult<Tensor> {
        if x.len() != y.len() {
            return Err(PyValueError::new_err(format!(
                "{} inputs but {} labels",
                x.len(),
                y.len()
            )));
        }
        let mut shape = vec![x.len()];
        shape.extend(&self.inner.input_shape);
        Tensor::new(shape, x.concat()).map_err(to_py)
    }
}

#[pyclass(name = "Mask", module = "fedpai_py", frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct PyMask {
    inner: fedpai::Mask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(bits: Vec<bool>) -> Self {
        Self {
            inner: fedpai::Mask::from_bits(bits),
        }
    }

    #[getter]
    fn bits(&self) -> Vec<bool> {
        self.inner.bits().to_vec()
    }

    fn count_ones(&self) -> usize {
        self.inner.count_ones()
    }

    fn kept_fraction(&self) -> f64 {
        self.inner.kept_fraction()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mask(kept={}/{})",
            self.inner.count_ones(),
            self.inner.len()
        )
    }
}

/// GraSP importance `-w * (H g)` of every prunable weight on one batch.
#[pyfunction]
fn grasp_score(
    spec: &PyModelSpec,
    params: Vec<f64>,
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
) -> PyResult<Vec<f64>> {
    let state = spec.state(params)?;
    let bx = spec.batch(x, &y)?;
    let s = pruning::grasp_score(&spec.inner, &state, &bx, &y).map_err(to_py)?;
    Ok(s.values().to_vec())
}

#[pyfunction]
fn top_kappa_mask(scores: Vec<f64>, kappa: f64) -> PyResult<PyMask> {
    let s = ImportanceScore::new(scores).map_err(to_py)?;
    Ok(PyMask {
        inner: pruning::top_kappa_mask(&s, kappa).map_err(to_py)?,
    })
}

#[pyfunction]
fn kept_count(kappa: f64, n: usize) -> usize {
    fedpai::mask::kept_count(kappa, n)
}

fn updates(
    spec: &PyModelSpec,
    models: Vec<(Vec<f64>, PyMask)>,
) -> PyResult<Vec<(ModelState, fedpai::Mask)>> {
    models
        .into_iter()
        .map(|(p, m)| Ok((spec.state(p)?, m.inner)))
        .collect()
}

/// Mean of masked client models, dividing by the number of clients.
#[pyfunction]
fn aggregate_fedavg(spec: &PyModelSpec, models: Vec<(Vec<f64>, PyMask)>) -> PyResult<Vec<f64>> {
    let ups = updates(spec, models)?;
    Ok(federation::aggregate_fedavg(&ups).map_err(to_py)?.params)
}

/// FedAvg followed by global top-kappa by magnitude.
#[pyfunction]
fn aggregate_sparsity_aware(
    spec: &PyModelSpec,
    models: Vec<(Vec<f64>, PyMask)>,
    kappa: f64,
) -> PyResult<(Vec<f64>, PyMask)> {
    let ups = updates(spec, models)?;
    let (s, m) = federation::aggregate_sparsity_aware(&ups, kappa).map_err(to_py)?;
    Ok((s.params, PyMask { inner: m }))
}

#[pyfunction]
fn compression_rate(total_params: usize, nnz: usize) -> PyResult<f64> {
    metrics::compression_rate(total_params, nnz).map_err(to_py)
}

/// Client shards as lists of sample indices; `alpha=None` gives an IID split.
#[pyfunction]
#[pyo3(signature = (labels, num_classes, num_clients, alpha=None, seed=0))]
fn partition(
    labels: Vec<usize>,
    num_classes: usize,
    num_clients: usize,
    alpha: Option<f64>,
    seed: u64,
) -> PyResult<Vec<Vec<usize>>> {
    let n = labels.len();
    let features = Tensor::zeros(vec![n, 1]).map_err(to_py)?;
    let data = Dataset::new(features, labels, num_classes).map_err(to_py)?;
    let plan = match alpha {
        Some(a) => partition_dirichlet(&data, num_clients, a, seed),
        None => partition_iid(&data, num_clients, seed),
    }
    .map_err(to_py)?;
    Ok(plan.clients)
}

/// One grid cell of a TOML experiment config, stepped a round at a time.
#[pyclass(name = "Simulation", module = "fedpai_py")]
struct PySimulation {
    inner: federation::Simulation,
    cell: String,
}

#[pymethods]
impl PySimulation {
    #[new]
    #[pyo3(signature = (config, cell=0))]
    fn new(config: &str, cell: usize) -> PyResult<Self> {
        let cfg = parse_config(config).map_err(to_py)?;
        cfg.validate().map_err(to_py)?;
        let cells = cfg.cells();
        let c = cells.get(cell).ok_or_else(|| {
            PyValueError::new_err(format!(
                "cell {cell} out of range (grid has {})",
                cells.len()
            ))
        })?;
        let run = cfg.run_config(c).map_err(to_py)?;
        Ok(Self {
            inner: federation::Simulation::new(&run, c.seed).map_err(to_py)?,
            cell: c.id(),
        })
    }

    #[getter]
    fn cell(&self) -> &str {
        &self.cell
    }

    #[getter]
    fn round(&self) -> usize {
        self.inner.server().round
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.spec().num_params()
    }

    /// Parameters of the model the server currently distributes.
    fn global_params(&self) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .server()
            .distributed_model()
            .map_err(to_py)?
            .params)
    }

    /// Runs one round and returns its report as a dict.
    fn run_round<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let r = py.detach(|| self.inner.run_round()).map_err(to_py)?;
        let text = serde_json::to_string(&r).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        json_to_py(py, &text)
    }

    /// Runs the remaining rounds; returns the list of round reports.
    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let reports = py.detach(|| self.inner.run(|_| Ok(()))).map_err(to_py)?;
        let text =
            serde_json::to_string(&reports).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        json_to_py(py, &text)
    }
}

/// Number of cells a TOML experiment config expands to.
#[pyfunction]
fn grid_size(config: &str) -> PyResult<usize> {
    let cfg = parse_config(config).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg.cells().len())
}

#[pymodule]
fn fedpai_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(grasp_score, m)?)?;
    m.add_function(wrap_pyfunction!(top_kappa_mask, m)?)?;
    m.add_function(wrap_pyfunction!(kept_count, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_fedavg, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_sparsity_aware, m)?)?;
    m.add_function(wrap_pyfunction!(compression_rate, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(grid_size, m)?)?;
    Ok(())
}
