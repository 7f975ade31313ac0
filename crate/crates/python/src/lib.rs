//! Python bindings: datasets, architectures, checkpoint stores, pool
//! construction and every soup method.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use soupforge::config::RunConfig;
use soupforge::finetune;
use soupforge::model::{self, Activation, Split};
use soupforge::params::{self, CheckpointStore, ParamVector};
use soupforge::soup::{self, SoupMethod, SoupTrainConfig};
use soupforge::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::NotFound(_) => PyIOError::new_err(e.to_string()),
        Error::TrainingDiverged(_) | Error::BudgetViolation { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Dataset", module = "soupforge", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: model::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, split = "val"))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, split: &str) -> PyResult<Self> {
        let split: Split = split.parse().map_err(to_py)?;
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|r| r.len() != dim) {
            return Err(PyValueError::new_err("feature rows must share one length"));
        }
        let flat = features.into_iter().flatten().collect();
        Ok(PyDataset {
            inner: model::Dataset::new(flat, labels, dim, split).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn read_csv(path: PathBuf, split: &str) -> PyResult<Self> {
        let split: Split = split.parse().map_err(to_py)?;
        Ok(PyDataset {
            inner: model::Dataset::read_csv(path, split).map_err(to_py)?,
        })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(path).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn split(&self) -> String {
        self.inner.split().to_string()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len()).map(|i| self.inner.row(i).to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, dim={}, split={})", self.inner.len(), self.inner.dim(), self.inner.split())
    }
}

#[pyclass(name = "ModelSpec", module = "soupforge", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModelSpec {
    inner: model::ModelSpec,
}

#[pymethods]
impl PyModelSpec {
    #[new]
    #[pyo3(signature = (input_dim, hidden_dims, num_classes, activation = "relu"))]
    fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize, activation: &str) -> PyResult<Self> {
        let act: Activation = activation.parse().map_err(to_py)?;
        Ok(PyModelSpec {
            inner: model::ModelSpec::new(input_dim, hidden_dims, num_classes, act).map_err(to_py)?,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// `(name, shape)` for each parameter tensor, in storage order.
    fn layers(&self) -> Vec<(String, Vec<usize>)> {
        self.inner
            .layer_map()
            .layers()
            .iter()
            .map(|l| (l.name.clone(), l.shape.clone()))
            .collect()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        finetune::init_params(&self.inner, seed).into_inner()
    }

    /// Mean loss and accuracy of `params` on `data`.
    #[pyo3(signature = (params, data, label_smoothing = 0.0))]
    fn evaluate(&self, params: Vec<f64>, data: &PyDataset, label_smoothing: f64) -> PyResult<(f64, f64)> {
        let l = model::evaluate(&self.inner, &params, &data.inner, label_smoothing).map_err(to_py)?;
        Ok((l.value, l.correct as f64 / data.inner.len() as f64))
    }

    /// Loss and its gradient with respect to `params`.
    #[pyo3(signature = (params, data, label_smoothing = 0.0))]
    fn gradient(&self, params: Vec<f64>, data: &PyDataset, label_smoothing: f64) -> PyResult<(f64, Vec<f64>)> {
        let (l, g) = model::backward(&self.inner, &params, &data.inner, label_smoothing).map_err(to_py)?;
        Ok((l.value, g.into_inner()))
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelSpec({}-{:?}-{}, {})",
            self.inner.input_dim, self.inner.hidden_dims, self.inner.num_classes, self.inner.activation
        )
    }
}

/// Lazily loaded ingredient pool. Not shareable across threads.
#[pyclass(name = "CheckpointStore", module = "soupforge", unsendable)]
struct PyCheckpointStore {
    inner: CheckpointStore,
}

#[pymethods]
impl PyCheckpointStore {
    #[staticmethod]
    fn open(manifest: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpointStore {
            inner: CheckpointStore::open(manifest).map_err(to_py)?,
        })
    }

    /// Writes `vectors` as checkpoints laid out by `spec` under `dir`.
    #[staticmethod]
    fn create(dir: PathBuf, spec: &PyModelSpec, vectors: Vec<Vec<f64>>) -> PyResult<Self> {
        let vs: Vec<ParamVector> = vectors.into_iter().map(ParamVector::new).collect();
        Ok(PyCheckpointStore {
            inner: CheckpointStore::create(dir, &spec.inner.layer_map(), &vs).map_err(to_py)?,
        })
    }

    /// Loads ingredient `id` (1-based).
    fn load(&self, id: usize) -> PyResult<Vec<f64>> {
        let h = self.inner.acquire_one(id).map_err(to_py)?;
        let v = h.to_vec();
        self.inner.release(vec![h]);
        Ok(v)
    }

    #[pyo3(signature = (ceiling = None))]
    fn set_ceiling(&self, ceiling: Option<usize>) {
        self.inner.set_ceiling(ceiling);
    }

    #[getter]
    fn peak_resident(&self) -> usize {
        self.inner.peak_resident()
    }

    fn reset_peak(&self) {
        self.inner.reset_peak();
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "SoupResult", module = "soupforge", frozen, skip_from_py_object)]
struct PySoupResult {
    #[pyo3(get)]
    soup: Vec<f64>,
    /// Trained coefficients, one row per ingredient.
    #[pyo3(get)]
    alpha: Vec<Vec<f64>>,
    /// Weight each raw ingredient carries, one row per ingredient.
    #[pyo3(get)]
    effective: Vec<Vec<f64>>,
    #[pyo3(get)]
    members: Vec<usize>,
    /// `(step, val_loss, grad_norm_sq)` per outer iteration.
    #[pyo3(get)]
    trace: Vec<(usize, f64, f64)>,
    #[pyo3(get)]
    blocks: Vec<Vec<usize>>,
}

fn rows(c: &soup::MixCoefficients) -> Vec<Vec<f64>> {
    (0..c.k()).map(|k| c.row(k).to_vec()).collect()
}

impl From<soup::SoupResult> for PySoupResult {
    fn from(r: soup::SoupResult) -> Self {
        PySoupResult {
            alpha: rows(&r.alpha),
            effective: rows(&r.effective),
            members: r.members,
            trace: r.trace.iter().map(|p| (p.step, p.val_loss, p.grad_norm_sq)).collect(),
            blocks: r.blocks,
            soup: r.soup.into_inner(),
        }
    }
}

#[pymethods]
impl PySoupResult {
    fn __repr__(&self) -> String {
        format!("SoupResult(k={}, trace_len={})", self.alpha.len(), self.trace.len())
    }
}

/// Synthetic Gaussian-blob splits `(train, val, test)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, n_train = None, n_val = None, n_test = None))]
fn generate_dataset(
    seed: u64,
    n_train: Option<usize>,
    n_val: Option<usize>,
    n_test: Option<usize>,
) -> PyResult<(PyDataset, PyDataset, PyDataset)> {
    let d = finetune::DataSpec::default();
    let spec = finetune::DataSpec {
        seed,
        n_train: n_train.unwrap_or(d.n_train),
        n_val: n_val.unwrap_or(d.n_val),
        n_test: n_test.unwrap_or(d.n_test),
        ..d
    };
    let s = finetune::generate_dataset(&spec).map_err(to_py)?;
    Ok((
        PyDataset { inner: s.train },
        PyDataset { inner: s.val },
        PyDataset { inner: s.test },
    ))
}

fn run_config(config: Option<PathBuf>, seed: Option<u64>) -> PyResult<RunConfig> {
    let cfg = match config {
        Some(p) => RunConfig::load(p).map_err(to_py)?,
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Pretrains, fine-tunes `K` ingredients and writes them plus a manifest to
/// `dir`. Returns the manifest path and the architecture.
#[pyfunction]
#[pyo3(signature = (dir, train, config = None, seed = None, k = None))]
fn build_pool(
    dir: PathBuf,
    train: &PyDataset,
    config: Option<PathBuf>,
    seed: Option<u64>,
    k: Option<usize>,
) -> PyResult<(PathBuf, PyModelSpec)> {
    let mut cfg = run_config(config, seed)?;
    if let Some(k) = k {
        cfg.k = k;
    }
    let factory = cfg.factory().map_err(to_py)?;
    let pool = finetune::build_pool(dir, &train.inner, &factory).map_err(to_py)?;
    Ok((pool.manifest, PyModelSpec { inner: factory.model }))
}

/// Builds a soup with `method` (uniform, greedy, learned-softmax[-plus],
/// hl[-plus], mehl[-plus]). Unset hyperparameters take the configured
/// defaults; the softmax baseline uses its own learning rate and decay.
#[pyfunction]
#[pyo3(signature = (
    method, store, spec, val, *, config = None, seed = None, model_batch = None,
    outer_iters = None, inner_iters = None, data_batch = None, lr = None, weight_decay = None
))]
#[allow(clippy::too_many_arguments)]
fn run_soup(
    method: &str,
    store: &PyCheckpointStore,
    spec: &PyModelSpec,
    val: &PyDataset,
    config: Option<PathBuf>,
    seed: Option<u64>,
    model_batch: Option<usize>,
    outer_iters: Option<usize>,
    inner_iters: Option<usize>,
    data_batch: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
) -> PyResult<PySoupResult> {
    let m: SoupMethod = method.parse().map_err(to_py)?;
    let rc = run_config(config, seed)?;
    let base = match m {
        SoupMethod::LearnedSoftmax { .. } => rc.softmax_config(),
        _ => rc.soup_config(),
    };
    let reshaped = outer_iters.is_some() || inner_iters.is_some();
    let cfg = SoupTrainConfig {
        model_batch: model_batch.unwrap_or(base.model_batch),
        outer_iters: outer_iters.unwrap_or(base.outer_iters),
        inner_iters: inner_iters.unwrap_or(base.inner_iters),
        data_batch: data_batch.unwrap_or(base.data_batch),
        lr: lr.unwrap_or(base.lr),
        weight_decay: weight_decay.unwrap_or(base.weight_decay),
        schedule_horizon: if reshaped { None } else { base.schedule_horizon },
        ..base
    };
    let r = soup::run_method(m, &store.inner, &spec.inner, &val.inner, &cfg).map_err(to_py)?;
    Ok(r.into())
}

/// Block of `b` ingredient ids drawn at outer iteration `t` (1-based).
#[pyfunction]
fn sample_block(k: usize, b: usize, seed: u64, t: usize) -> PyResult<Vec<usize>> {
    if b == 0 || b > k {
        return Err(PyValueError::new_err(format!("block size {b} outside 1..={k}")));
    }
    Ok(soup::sample_block(k, b, seed, t))
}

#[pyfunction]
fn write_checkpoint(path: PathBuf, spec: &PyModelSpec, params: Vec<f64>) -> PyResult<()> {
    params::write_checkpoint(&spec.inner.layer_map(), &params, path).map_err(to_py)
}

/// Reads a checkpoint; returns `(layers, params)` with `layers` as
/// `(name, shape)` pairs.
#[pyfunction]
fn read_checkpoint(path: PathBuf) -> PyResult<(Vec<(String, Vec<usize>)>, Vec<f64>)> {
    let (layout, v) = params::read_checkpoint(path).map_err(to_py)?;
    let layers = layout.layers().iter().map(|l| (l.name.clone(), l.shape.clone())).collect();
    Ok((layers, v.into_inner()))
}

#[pyfunction]
fn soup_methods() -> Vec<&'static str> {
    SoupMethod::names()
}

#[pymodule]
fn _soupforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyCheckpointStore>()?;
    m.add_class::<PySoupResult>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(build_pool, m)?)?;
    m.add_function(wrap_pyfunction!(run_soup, m)?)?;
    m.add_function(wrap_pyfunction!(sample_block, m)?)?;
    m.add_function(wrap_pyfunction!(write_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(read_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(soup_methods, m)?)?;
    Ok(())
}
