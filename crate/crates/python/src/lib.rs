//! Python bindings for `engram-ar`.
//!
//! Reports come back as plain dicts; models always run in `f32`.

use std::path::PathBuf;

use engram_ar::checkpoint::{load_checkpoint, save_checkpoint};
use engram_ar::config::ExperimentConfig;
use engram_ar::diagnostics::{donor_probe, gate_clamp_sweep, stratified_jaccard};
use engram_ar::inference::sample;
use engram_ar::model::{EngramModel, ForwardOptions};
use engram_ar::tokens::{generate_range, TokenGrid};
use engram_ar::training::{count_params, solve_table_size, train};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: engram_ar::error::Error) -> PyErr {
    match e {
        engram_ar::error::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_dict<'py, V: serde::Serialize>(py: Python<'py>, value: &V) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Experiment configuration. Every component seed derives from `seed`.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn toy() -> Self {
        PyConfig {
            inner: ExperimentConfig::toy(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ExperimentConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let inner = inner.resolve();
        inner.validate().map_err(py_err)?;
        Ok(PyConfig { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn with_seed(&self, seed: u64) -> Self {
        PyConfig {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    /// Returns a copy whose memory tables are sized for backbone share `rho`.
    fn with_target_rho(&self, rho: f64) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        let template = inner
            .model
            .engram
            .first()
            .ok_or_else(|| PyValueError::new_err("no engram module to resize"))?;
        let m = solve_table_size(rho, &inner.model.backbone, template, inner.model.engram.len()).map_err(py_err)?;
        for e in &mut inner.model.engram {
            e.table_size = m;
        }
        Ok(PyConfig { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn train_steps(&self) -> usize {
        self.inner.train.total_steps
    }

    #[setter]
    fn set_train_steps(&mut self, steps: usize) {
        self.inner.train.total_steps = steps;
    }

    #[getter]
    fn train_size(&self) -> usize {
        self.inner.train_size
    }

    #[setter]
    fn set_train_size(&mut self, n: usize) {
        self.inner.train_size = n;
    }

    /// Parameter accounting for the configured model.
    fn params<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &count_params(&self.inner.model.backbone, &self.inner.model.engram))
    }

    fn train_split(&self) -> PyResult<Vec<Grid>> {
        Ok(self.inner.train_split().map_err(py_err)?.into_iter().map(Grid::from).collect())
    }

    fn eval_split(&self) -> PyResult<Vec<Grid>> {
        Ok(self.inner.eval_split().map_err(py_err)?.into_iter().map(Grid::from).collect())
    }

    fn generate(&self, start: u64, count: usize) -> PyResult<Vec<Grid>> {
        let grids = generate_range(&self.inner.corpus, start, count).map_err(py_err)?;
        Ok(grids.into_iter().map(Grid::from).collect())
    }

    /// Stratified patch-overlap report over the training split.
    fn jaccard_report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let corpus = self.inner.train_split().map_err(py_err)?;
        let report = py
            .detach(|| stratified_jaccard(&corpus, &self.inner.probe.jaccard))
            .map_err(py_err)?;
        to_dict(py, &report)
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, steps={})", self.inner.seed, self.inner.train.total_steps)
    }
}

/// A class-conditioned token grid.
#[pyclass(name = "Grid", from_py_object)]
#[derive(Clone)]
struct Grid {
    inner: TokenGrid,
}

impl From<TokenGrid> for Grid {
    fn from(inner: TokenGrid) -> Self {
        Grid { inner }
    }
}

#[pymethods]
impl Grid {
    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn class_id(&self) -> usize {
        self.inner.class_id
    }

    /// Row-major image tokens.
    #[getter]
    fn cells(&self) -> Vec<u32> {
        self.inner.cells.clone()
    }

    fn __eq__(&self, other: &Grid) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Grid({}x{}, class={})", self.inner.height, self.inner.width, self.inner.class_id)
    }
}

fn unwrap_grids(grids: &[Grid]) -> Vec<TokenGrid> {
    grids.iter().map(|g| g.inner.clone()).collect()
}

/// Transformer with hash-keyed memory modules.
#[pyclass(name = "Model")]
struct Model {
    inner: EngramModel<f32>,
}

#[pymethods]
impl Model {
    /// Fresh initialization from the configured model and training seed.
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let mut mc = config.inner.model.clone();
        config.inner.train.apply_to(&mut mc);
        let inner = EngramModel::init(mc, config.inner.train.seed).map_err(py_err)?;
        Ok(Model { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(&path).map_err(py_err)?;
        Ok(Model { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, 0, 0, None, serde_json::Value::Null).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.backbone().num_classes
    }

    /// Mean next-token cross-entropy over the image cells of `grid`.
    #[pyo3(signature = (grid, gate_clamp=None))]
    fn loss(&self, py: Python<'_>, grid: &Grid, gate_clamp: Option<f64>) -> PyResult<f64> {
        let seq = engram_ar::tokens::raster_flatten(&grid.inner);
        let opts = ForwardOptions {
            gate_clamp,
            ..Default::default()
        };
        py.detach(|| self.inner.loss(&seq, &opts)).map_err(py_err)
    }

    /// Per-position logits over the full vocabulary.
    #[pyo3(signature = (grid, gate_clamp=None))]
    fn logits(&self, grid: &Grid, gate_clamp: Option<f64>) -> PyResult<Vec<Vec<f32>>> {
        let seq = engram_ar::tokens::raster_flatten(&grid.inner);
        let opts = ForwardOptions {
            gate_clamp,
            ..Default::default()
        };
        let t = self.inner.logits(&seq, &opts).map_err(py_err)?;
        Ok((0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect())
    }

    /// Draws sample `index` of `class_id` with the config's sampler.
    #[pyo3(signature = (config, class_id, index=0))]
    fn sample(&self, py: Python<'_>, config: &PyConfig, class_id: usize, index: u64) -> PyResult<Grid> {
        let g = py
            .detach(|| sample(&self.inner, class_id, &config.inner.sampler, index))
            .map_err(py_err)?;
        Ok(g.into())
    }

    fn gate_clamp_sweep<'py>(&self, py: Python<'py>, config: &PyConfig, grids: Vec<Grid>) -> PyResult<Bound<'py, PyAny>> {
        let grids = unwrap_grids(&grids);
        let report = py
            .detach(|| gate_clamp_sweep(&self.inner, &grids, &config.inner.probe.clamps))
            .map_err(py_err)?;
        to_dict(py, &report)
    }

    fn donor_probe<'py>(
        &self,
        py: Python<'py>,
        config: &PyConfig,
        references: Vec<Grid>,
        pool: Vec<Grid>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (refs, pool) = (unwrap_grids(&references), unwrap_grids(&pool));
        let report = py
            .detach(|| donor_probe(&self.inner, &refs, &pool, &config.inner.probe.donor))
            .map_err(py_err)?;
        to_dict(py, &report)
    }
}

/// Trains a fresh model on the config's training split.
///
/// Returns the model and a list of logged curve points.
#[pyfunction(name = "train")]
fn train_py<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let cfg = &config.inner;
    let corpus = cfg.train_split().map_err(py_err)?;
    let eval = cfg.eval_split().map_err(py_err)?;
    let outcome = py
        .detach(|| train::<f32>(&corpus, &eval, &cfg.model, &cfg.train, &mut |_| {}))
        .map_err(py_err)?;
    let curve = to_dict(py, &outcome.curve)?;
    Ok((Model { inner: outcome.model }, curve))
}

#[pyfunction]
fn version() -> String {
    engram_ar::config::version_string()
}

#[pymodule]
fn engram_ar_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<Grid>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train_py, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
