//! Python bindings: configuration, synthetic data, training and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rcm_core::checkpoint::Checkpoint;
use rcm_core::chunking;
use rcm_core::cli::load_model;
use rcm_core::config::RunConfig;
use rcm_core::data::{self, QAExample};
use rcm_core::episode::{rollout, RolloutMode};
use rcm_core::metrics;
use rcm_core::model::{Mode, Model};
use rcm_core::trainer::Trainer;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Renders one Python value as a TOML literal.
fn toml_literal(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(b) = v.extract::<bool>() {
        return Ok(b.to_string());
    }
    if let Ok(i) = v.extract::<i64>() {
        return Ok(i.to_string());
    }
    if let Ok(f) = v.extract::<f64>() {
        return Ok(format!("{f:?}"));
    }
    if let Ok(s) = v.extract::<String>() {
        return Ok(format!("{s:?}"));
    }
    if let Ok(items) = v.cast::<PyList>() {
        let parts: PyResult<Vec<String>> = items.iter().map(|x| toml_literal(&x)).collect();
        return Ok(format!("[{}]", parts?.join(", ")));
    }
    Err(value_err(format!("unsupported config value {v}")))
}

/// Run configuration. Keyword arguments override the defaults; unknown keys
/// raise `ValueError`.
#[pyclass(name = "Config", module = "rcm_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut text = String::new();
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                text.push_str(&format!("{} = {}\n", k.extract::<String>()?, toml_literal(&v)?));
            }
        }
        Ok(Self {
            inner: RunConfig::parse(&text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::parse(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).map_err(value_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn segments(&self) -> usize {
        self.inner.segments
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.inner.total_steps
    }

    fn __repr__(&self) -> String {
        format!("Config(mode={:?}, d_model={}, segments={})", self.mode(), self.inner.d_model, self.inner.segments)
    }
}

/// One question/document pair.
#[pyclass(name = "Example", module = "rcm_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyExample {
    inner: QAExample,
}

#[pymethods]
impl PyExample {
    #[getter]
    fn doc_tokens(&self) -> Vec<usize> {
        self.inner.doc_tokens.clone()
    }

    #[getter]
    fn question_tokens(&self) -> Vec<usize> {
        self.inner.question_tokens.clone()
    }

    /// Inclusive `(start, end)` document span, or `None` when unanswerable.
    #[getter]
    fn answer(&self) -> Option<(usize, usize)> {
        self.inner.answer
    }

    #[getter]
    fn answerable(&self) -> bool {
        self.inner.answerable
    }

    #[getter]
    fn reference_answers(&self) -> Vec<Vec<String>> {
        self.inner.reference_answers.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.doc_tokens.len()
    }
}

fn wrap(examples: Vec<QAExample>) -> Vec<PyExample> {
    examples.into_iter().map(|inner| PyExample { inner }).collect()
}

fn unwrap(examples: &[PyExample]) -> Vec<QAExample> {
    examples.iter().map(|e| e.inner.clone()).collect()
}

#[pyfunction]
#[pyo3(signature = (config, seed=None, count=None))]
fn generate_dataset(config: &PyConfig, seed: Option<u64>, count: Option<usize>) -> PyResult<Vec<PyExample>> {
    let mut c = config.inner.synth();
    c.seed = seed.unwrap_or(c.seed);
    c.count = count.unwrap_or(c.count);
    Ok(wrap(data::generate_synthetic(&c).map_err(value_err)?))
}

#[pyfunction]
fn save_dataset(config: &PyConfig, path: PathBuf, examples: Vec<PyExample>) -> PyResult<()> {
    data::save_dataset(&path, &unwrap(&examples), &config.inner.synth().vocab()).map_err(runtime_err)
}

#[pyfunction]
fn load_dataset(config: &PyConfig, path: PathBuf) -> PyResult<Vec<PyExample>> {
    Ok(wrap(
        data::load_dataset(&path, &config.inner.synth().vocab()).map_err(value_err)?,
    ))
}

/// A reader together with the configuration it was built from.
#[pyclass(name = "Model", module = "rcm_py", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, mode=None, seed=None))]
    fn new(config: &PyConfig, mode: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = config.inner.clone();
        if let Some(m) = mode {
            cfg.mode = m.parse::<Mode>().map_err(value_err)?;
        }
        let inner = Model::new(cfg.model(), cfg.mode, seed.unwrap_or(cfg.seed)).map_err(value_err)?;
        Ok(Self { inner, config: cfg })
    }

    #[staticmethod]
    fn load(config: &PyConfig, path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(value_err)?;
        let inner = load_model(&config.inner, &ckpt).map_err(value_err)?;
        let mut cfg = config.inner.clone();
        cfg.mode = inner.mode;
        Ok(Self { inner, config: cfg })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(runtime_err)
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.num_scalars()
    }

    /// Reads `example` with argmax moves; one dict per segment.
    #[pyo3(signature = (example, stride=None))]
    fn read<'py>(
        &self,
        py: Python<'py>,
        example: &PyExample,
        stride: Option<i64>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = rollout(
            &self.inner,
            &example.inner,
            self.config.segments,
            RolloutMode::Test,
            stride,
            &mut rng,
        )
        .map_err(value_err)?
        .episode;
        ep.segments
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("doc_start", s.doc_start())?;
                d.set_item("doc_len", s.doc_len())?;
                d.set_item("q", s.q)?;
                d.set_item("contains", s.contains)?;
                d.set_item("action", s.action.map(|a| a.stride))?;
                d.set_item("policy", s.policy_probs.clone())?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Model(mode={:?}, parameters={})", self.mode(), self.num_parameters())
    }
}

fn step_dict<'py>(py: Python<'py>, s: &rcm_core::trainer::StepLog) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", s.step)?;
    d.set_item("lr", s.lr)?;
    d.set_item("answer_loss", s.l_ans)?;
    d.set_item("scorer_loss", s.l_cs)?;
    d.set_item("policy_loss", s.l_cp)?;
    d.set_item("mean_return", s.mean_r)?;
    Ok(d)
}

/// Optimiser state for one model.
#[pyclass(name = "Trainer", module = "rcm_py")]
struct PyTrainer {
    inner: Trainer,
    config: RunConfig,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(model: &PyModel) -> PyResult<Self> {
        let inner = Trainer::new(model.inner.clone(), model.config.train()).map_err(value_err)?;
        Ok(Self {
            inner,
            config: model.config.clone(),
        })
    }

    /// Runs one optimisation step and returns its log entry.
    fn step<'py>(&mut self, py: Python<'py>, examples: Vec<PyExample>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.train_step(&unwrap(&examples)).map_err(runtime_err)?;
        step_dict(py, &s)
    }

    /// Trains to the configured number of steps; returns every log entry.
    fn run<'py>(&mut self, py: Python<'py>, examples: Vec<PyExample>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let data = unwrap(&examples);
        self.inner.run(&data, |_| Ok(())).map_err(runtime_err)?;
        self.inner.log.iter().map(|s| step_dict(py, s)).collect()
    }

    #[getter]
    fn current_step(&self) -> usize {
        self.inner.step
    }

    /// Snapshot of the model being trained.
    #[getter]
    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.model.clone(),
            config: self.config.clone(),
        }
    }
}

/// Scores `model` on `examples`; returns a dict of metrics.
#[pyfunction]
#[pyo3(signature = (model, examples, stride=None))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    examples: Vec<PyExample>,
    stride: Option<i64>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &model.config;
    let r = metrics::evaluate(
        &model.inner,
        &unwrap(&examples),
        &cfg.synth().vocab(),
        cfg.segments,
        stride,
        cfg.bucket_width,
    )
    .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("f1", r.f1)?;
    d.set_item("answerable_f1", r.answerable_f1)?;
    d.set_item("unanswerable_recall", r.unanswerable_recall)?;
    d.set_item("hit_rate", r.hit_rate)?;
    d.set_item("center_distances", r.center_distances.clone())?;
    let buckets: Vec<(usize, usize, f64)> = r.buckets.iter().map(|b| (b.distance, b.count, b.mean_f1)).collect();
    d.set_item("buckets", buckets)?;
    d.set_item("per_example_f1", r.per_example_f1.clone())?;
    Ok(d)
}

#[pyfunction]
fn accumulated_rewards(q: Vec<f64>, r: Vec<f64>) -> PyResult<Vec<f64>> {
    chunking::accumulated_rewards(&q, &r).map_err(value_err)
}

#[pyfunction]
fn action_credits(q: Vec<f64>, returns: Vec<f64>) -> PyResult<Vec<f64>> {
    chunking::action_credits(&q, &returns).map_err(value_err)
}

/// Word F1; `None` stands for the unanswerable prediction.
#[pyfunction]
#[pyo3(signature = (prediction, references))]
fn word_f1(prediction: Option<Vec<String>>, references: Vec<Vec<String>>) -> f64 {
    metrics::word_f1(prediction.as_deref(), &references)
}

#[pymodule]
fn rcm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyExample>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(accumulated_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(action_credits, m)?)?;
    m.add_function(wrap_pyfunction!(word_f1, m)?)?;
    let modes: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
    m.add("MODES", modes)?;
    Ok(())
}
