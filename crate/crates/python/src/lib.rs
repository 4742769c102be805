//! Python bindings: load a trained checkpoint (or build the default toy
//! model), predict with any executor, and compute calibration metrics.
//!
//! Tensors cross the boundary as flat NCHW lists of floats plus a shape tuple.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use smcdo::bench::default_toy_model;
use smcdo::data::Normalization;
use smcdo::eval::{self, CorruptionKind, CorruptionSpec, Predictor};
use smcdo::graph::{split_at, ExecutorKind, ModelGraph};
use smcdo::stochastic::DropoutSpec;
use smcdo::tensor::{Shape, Tensor};
use smcdo::Error;
use std::path::Path;

fn py_err(e: Error) -> PyErr {
    match e.root() {
        Error::Io(_) | Error::Data(_) | Error::WeightFormat(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_tensor(data: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Tensor> {
    Tensor::new(Shape::new(shape.0, shape.1, shape.2, shape.3), data).map_err(py_err)
}

type Flat = (Vec<f64>, (usize, usize, usize, usize));

fn from_tensor(t: Tensor) -> Flat {
    let [n, c, h, w] = t.shape().dims();
    (t.into_data(), (n, c, h, w))
}

#[pyclass(module = "smcdo")]
struct Model {
    graph: ModelGraph,
    normalization: Normalization,
}

#[pymethods]
impl Model {
    /// Loads `<path>.bin` and its JSON sidecar; the hash in the sidecar is verified.
    #[staticmethod]
    #[pyo3(signature = (path, rate_inf))]
    fn load(path: &str, rate_inf: f64) -> PyResult<Self> {
        let (weights, meta) = smcdo_cli::checkpoint::load(Path::new(path)).map_err(py_err)?;
        let graph = smcdo_cli::checkpoint::instantiate(&weights, &meta, rate_inf).map_err(py_err)?;
        Ok(Model { graph, normalization: meta.normalization })
    }

    /// Randomly initialised benchmark model (10 classes, 3×32×32 input, identity normalisation).
    #[staticmethod]
    #[pyo3(signature = (rate_inf, seed = 0))]
    fn toy(rate_inf: f64, seed: u64) -> PyResult<Self> {
        let spec = DropoutSpec::spatial(0.1, rate_inf).map_err(py_err)?;
        let graph = default_toy_model(spec, seed).map_err(py_err)?;
        Ok(Model { graph, normalization: Normalization::identity(3) })
    }

    fn dropout_sites(&self) -> usize {
        self.graph.dropout_site_count()
    }

    fn parameter_count(&self) -> usize {
        self.graph.parameter_count()
    }

    /// Mean class probabilities for images in [0, 1]. `executor` is one of
    /// vanilla, mcdo_sequential, mcdo_branched, mcdo_branched_fused.
    #[pyo3(signature = (images, shape, executor = "mcdo_branched", samples = 3, seed = 0, batch_size = 100))]
    fn predict(
        &self,
        py: Python<'_>,
        images: Vec<f64>,
        shape: (usize, usize, usize, usize),
        executor: &str,
        samples: usize,
        seed: u64,
        batch_size: usize,
    ) -> PyResult<Flat> {
        let x = self.normalization.apply(&to_tensor(images, shape)?).map_err(py_err)?;
        let kind: ExecutorKind = executor.parse().map_err(py_err)?;
        py.detach(|| {
            let branched;
            let predictor = match kind {
                ExecutorKind::Vanilla => Predictor::Vanilla(&self.graph),
                ExecutorKind::McdoSequential => Predictor::Mcdo { graph: &self.graph, samples, seed },
                ExecutorKind::McdoBranched | ExecutorKind::McdoBranchedFused => {
                    branched = split_at(&self.graph, samples)?;
                    Predictor::Branched { model: &branched, seed, fused: kind == ExecutorKind::McdoBranchedFused }
                }
                ExecutorKind::DeepEnsemble => {
                    return Err(Error::Config("deep_ensemble needs several checkpoints; use the CLI".into()))
                }
            };
            predictor.predict(&x, batch_size)
        })
        .map(from_tensor)
        .map_err(py_err)
    }
}

/// Top-label expected calibration error of `N×K` probabilities (flattened).
#[pyfunction]
#[pyo3(signature = (probs, shape, labels, bins = 15))]
fn ece(probs: Vec<f64>, shape: (usize, usize, usize, usize), labels: Vec<usize>, bins: usize) -> PyResult<f64> {
    eval::ece(&to_tensor(probs, shape)?, &labels, bins).map_err(py_err)
}

#[pyfunction]
fn accuracy(probs: Vec<f64>, shape: (usize, usize, usize, usize), labels: Vec<usize>) -> PyResult<f64> {
    eval::accuracy(&to_tensor(probs, shape)?, &labels).map_err(py_err)
}

#[pyfunction]
fn nll(probs: Vec<f64>, shape: (usize, usize, usize, usize), labels: Vec<usize>) -> PyResult<f64> {
    eval::nll(&to_tensor(probs, shape)?, &labels).map_err(py_err)
}

#[pyfunction]
fn dice(pred: Vec<u8>, truth: Vec<u8>) -> PyResult<f64> {
    eval::dice(&pred, &truth).map_err(py_err)
}

/// Corrupted copy of images in [0, 1] at `level` 1–5.
#[pyfunction]
#[pyo3(signature = (images, shape, kind, level, seed = 0))]
fn corrupt(images: Vec<f64>, shape: (usize, usize, usize, usize), kind: &str, level: u8, seed: u64) -> PyResult<Flat> {
    let kind: CorruptionKind = kind.parse().map_err(py_err)?;
    let spec = CorruptionSpec::new(kind, level).map_err(py_err)?;
    eval::corrupt(&to_tensor(images, shape)?, spec, seed).map(from_tensor).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "smcdo")]
fn smcdo_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(nll, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    Ok(())
}
