//! Python bindings: experiments, training, prediction, checkpoints and metrics.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use msqnet::data::{generate_video as gen_video, make_zero_shot_splits};
use msqnet::harness::{self, Experiment};
use msqnet::metrics::{self, EvalBatch};
use msqnet::model::ForwardOptions;
use msqnet::tensor::Tensor;

fn err(e: msqnet::Error) -> PyErr {
    match e {
        msqnet::Error::Config(_) | msqnet::Error::UnknownClass(_) | msqnet::Error::Contract(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A full experiment description (model, data, training, classes, seed).
#[pyclass(name = "Experiment", module = "msqnet_py", from_py_object)]
#[derive(Clone)]
struct PyExperiment {
    inner: Experiment,
}

#[pymethods]
impl PyExperiment {
    /// The supervised eight-primitive setup.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn reference(seed: u64) -> Self {
        Self { inner: harness::reference_experiment(seed) }
    }

    /// Twelve shape-by-colour classes with the compositional text embedder.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn zero_shot(seed: u64) -> Self {
        Self { inner: harness::zero_shot_experiment(seed) }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: Experiment = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("serializable")
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.train.epochs = epochs;
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.n_train
    }

    #[setter]
    fn set_n_train(&mut self, n: usize) {
        self.inner.n_train = n;
    }

    #[getter]
    fn n_eval(&self) -> usize {
        self.inner.n_eval
    }

    #[setter]
    fn set_n_eval(&mut self, n: usize) {
        self.inner.n_eval = n;
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    fn __repr__(&self) -> String {
        format!("Experiment(classes={}, epochs={}, seed={})", self.inner.classes.len(), self.inner.train.epochs, self.inner.seed)
    }
}

#[pyclass(name = "Model", module = "msqnet_py", unsendable)]
struct PyModel {
    inner: msqnet::model::Msqnet,
    experiment: Experiment,
}

#[pymethods]
impl PyModel {
    /// A freshly initialized model for `experiment`.
    #[new]
    fn new(experiment: PyExperiment) -> PyResult<Self> {
        let inner = experiment.inner.build_model().map_err(err)?;
        Ok(Self { inner, experiment: experiment.inner })
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names().to_vec()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// SHA-256 over parameter names and values.
    fn checksum(&self) -> String {
        self.inner.params.checksum()
    }

    /// Class logits for a flat `T·3·H·W` pixel list.
    fn predict(&self, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        let e = &self.experiment.model.encoder;
        let video = Tensor::new(vec![e.frames, 3, e.height, e.width], pixels).map_err(|x| err(x.into()))?;
        self.inner.predict(&video, &self.inner.all_classes(), ForwardOptions::default()).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        msqnet::checkpoint::save_params(path, &self.inner.params).map_err(err)
    }

    fn load(&mut self, path: &str) -> PyResult<()> {
        msqnet::checkpoint::load_params(path, &mut self.inner.params).map_err(err)
    }

    /// Metrics of this model on the experiment's evaluation split.
    fn evaluate(&self) -> PyResult<Vec<(String, f64)>> {
        let split = msqnet::data::SplitSpec::supervised(self.experiment.classes.len());
        let (_, eval_set) = self.experiment.datasets(&split).map_err(err)?;
        let ev = harness::evaluate(&self.inner, &eval_set, self.experiment.train.threshold, ForwardOptions::default()).map_err(err)?;
        Ok(ev.metrics().into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }
}

/// Trains on the experiment's data; returns the model and final metrics.
#[pyfunction]
fn train(experiment: PyExperiment) -> PyResult<(PyModel, Vec<(String, f64)>)> {
    let outcome = harness::run_supervised(&experiment.inner).map_err(err)?;
    let metrics = outcome
        .record
        .final_eval
        .as_ref()
        .map(|e| e.metrics().into_iter().map(|(k, v)| (k.to_string(), v)).collect())
        .unwrap_or_default();
    Ok((PyModel { inner: outcome.model, experiment: experiment.inner }, metrics))
}

/// Renders one synthetic clip; returns (flat pixels, shape, multi-hot labels).
#[pyfunction]
fn generate_video(experiment: PyExperiment, labels: Vec<String>, seed: u64) -> PyResult<(Vec<f64>, Vec<usize>, Vec<f64>)> {
    let vocab = experiment.inner.vocabulary().map_err(err)?;
    let names: Vec<&str> = labels.iter().map(String::as_str).collect();
    let v = gen_video(&vocab, &names, seed, &experiment.inner.data).map_err(err)?;
    Ok((v.pixels.data().to_vec(), v.pixels.shape().to_vec(), v.labels))
}

/// Non-interpolated average precision, `None` without positives.
#[pyfunction]
fn average_precision(scores: Vec<f64>, truth: Vec<f64>) -> PyResult<Option<f64>> {
    if scores.len() != truth.len() {
        return Err(PyValueError::new_err("scores and truth differ in length"));
    }
    Ok(metrics::average_precision(&scores, &truth))
}

/// Mean AP over classes of `M×K` row lists.
#[pyfunction]
fn mean_ap(scores: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::mean_ap(&EvalBatch::from_rows(&scores, &truth).map_err(err)?).map_err(err)
}

/// Returns (seen, unseen) class-index lists per split.
#[pyfunction]
#[pyo3(signature = (k, seen_fraction=0.75, n_splits=10, seed=0))]
fn zero_shot_splits(k: usize, seen_fraction: f64, n_splits: usize, seed: u64) -> PyResult<Vec<(Vec<usize>, Vec<usize>)>> {
    let splits = make_zero_shot_splits(k, seen_fraction, n_splits, seed).map_err(err)?;
    Ok(splits.into_iter().map(|s| (s.seen, s.unseen)).collect())
}

/// Maximum relative gradient error of the tiny configuration.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn grad_check_tiny(seed: u64) -> PyResult<f64> {
    let report = harness::model_grad_check(&msqnet::model::tiny_config(), 4, seed, 1e-5, 1e-4).map_err(err)?;
    Ok(report.max_rel_error)
}

#[pymodule]
fn msqnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExperiment>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate_video, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(mean_ap, m)?)?;
    m.add_function(wrap_pyfunction!(zero_shot_splits, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check_tiny, m)?)?;
    Ok(())
}
