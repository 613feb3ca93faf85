//! Python bindings for `hallux`.
//!
//! Tensors cross the boundary as shape plus flat data; configs and reports
//! as JSON strings.

use std::path::PathBuf;

use hallux::datasets::{synth_generate, write_manifest, SynthConfig};
use hallux::encoding::{self, SignalWindow};
use hallux::experiment::{self, ExperimentConfig};
use hallux::{evaluation, models, training, HalluxError};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: HalluxError) -> PyErr {
    match e {
        HalluxError::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense row-major `f32` tensor.
#[pyclass(name = "Tensor", module = "hallux_py", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: hallux::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self { inner: hallux::Tensor::new(shape, data).map_err(py_err)? })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn window(series: Vec<Vec<f32>>, groups: Option<Vec<usize>>) -> PyResult<SignalWindow> {
    match groups {
        Some(g) => {
            let names = (0..series.len()).map(|c| format!("c{}", c + 1)).collect();
            SignalWindow::new(names, g, series)
        }
        None => SignalWindow::from_triaxial(series),
    }
    .map_err(py_err)
}

/// One-based channel order in which every channel pair is adjacent at least once.
#[pyfunction]
fn build_channel_sequence(num_channels: usize) -> PyResult<Vec<usize>> {
    Ok(encoding::build_channel_sequence(num_channels).map_err(py_err)?.one_based())
}

/// Crop every channel to `target_len` from `offset`, or pad it with `offset`
/// copies of the first sample and copies of the last after.
#[pyfunction]
#[pyo3(signature = (series, target_len, offset=0))]
fn crop_or_pad(series: Vec<Vec<f32>>, target_len: usize, offset: usize) -> PyResult<Vec<Vec<f32>>> {
    let w = encoding::crop_or_pad_at(&window(series, None)?, target_len, offset).map_err(py_err)?;
    Ok(w.series().to_vec())
}

/// Min-max scale to [-1, 1], per channel or per sensor group.
#[pyfunction]
#[pyo3(signature = (series, per_sensor=false, groups=None))]
fn normalize(series: Vec<Vec<f32>>, per_sensor: bool, groups: Option<Vec<usize>>) -> PyResult<Vec<Vec<f32>>> {
    Ok(encoding::normalize_pm1(&window(series, groups)?, per_sensor).series().to_vec())
}

/// Signal image `[H, W, 1]` of a triaxial window.
#[pyfunction]
fn inertial_image(series: Vec<Vec<f32>>, height: usize, width: usize) -> PyResult<PyTensor> {
    let w = window(series, None)?;
    let arr = encoding::build_channel_sequence(w.num_channels()).map_err(py_err)?;
    Ok(PyTensor { inner: encoding::inertial_to_image(&w, &arr, (height, width)).map_err(py_err)? })
}

#[pyfunction]
#[pyo3(signature = (anchor, positive, negative, margin=0.2))]
fn triplet_loss(anchor: Vec<f32>, positive: Vec<f32>, negative: Vec<f32>, margin: f64) -> PyResult<f64> {
    training::triplet_loss(&anchor, &positive, &negative, margin).map_err(py_err)
}

#[pyfunction]
fn regression_loss(h: Vec<f32>, m: Vec<f32>) -> PyResult<f64> {
    training::regression_loss(&h, &m).map_err(py_err)
}

/// Product of per-stream class probabilities, renormalized.
#[pyfunction]
fn fuse_late(scores: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
    let t: Vec<hallux::Tensor> = scores.into_iter().map(hallux::Tensor::from_vec).collect::<Result<_, _>>().map_err(py_err)?;
    Ok(models::fuse_late(&t).map_err(py_err)?.into_data())
}

#[pyfunction]
fn accuracy(preds: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    evaluation::accuracy(&preds, &labels).map_err(py_err)
}

/// Generates a synthetic dataset under `out`. `config` is a JSON object of
/// synthesis parameters; omitted keys take their defaults. Returns the
/// number of samples written.
#[pyfunction]
#[pyo3(signature = (out, config=None))]
fn synth(py: Python<'_>, out: PathBuf, config: Option<&str>) -> PyResult<usize> {
    let cfg: SynthConfig = match config {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => SynthConfig::default(),
    };
    py.detach(|| {
        let m = write_manifest(&synth_generate(&cfg)?, &out)?;
        Ok(m.samples.len())
    })
    .map_err(py_err)
}

/// Default experiment config on synthetic data, as JSON.
#[pyfunction]
fn synthetic_config(out: PathBuf, seed: u64) -> String {
    experiment::emit_config(&ExperimentConfig::synthetic(out, seed))
}

/// Validates a JSON config and returns it with defaults filled in.
#[pyfunction]
fn check_config(config: &str) -> PyResult<String> {
    Ok(experiment::emit_config(&experiment::parse_config_str(config).map_err(py_err)?))
}

/// Runs every stage for the configured protocols. Returns the reports as a
/// JSON array.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &str) -> PyResult<String> {
    let cfg = experiment::parse_config_str(config).map_err(py_err)?;
    let reports = py.detach(|| experiment::run_experiment(cfg)).map_err(py_err)?;
    serde_json::to_string(&reports).map_err(json_err)
}

#[pymodule]
fn hallux_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_function(wrap_pyfunction!(build_channel_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(crop_or_pad, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(inertial_image, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(regression_loss, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_late, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_config, m)?)?;
    m.add_function(wrap_pyfunction!(check_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
