//! Python bindings: the sensing model, metrics, tensor files and the
//! unfolding network, with NumPy arrays at the boundary.

use numpy::{PyArray1, PyArrayDyn, PyArrayMethods, PyReadonlyArrayDyn, PyUntypedArrayMethods};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use sci_unfold::eval::{self, SsimParams};
use sci_unfold::forward::{self, Measurement};
use sci_unfold::train::{self, ClipRecord, TrainingConfig};
use sci_unfold::{checkpoint, io, MaskSet, NetworkConfig, ParameterRegistry, SciError, Tensor, VideoBlock};

fn py_err(e: SciError) -> PyErr {
    match e {
        SciError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor_arg(a: &PyReadonlyArrayDyn<'_, f64>) -> PyResult<Tensor<f64>> {
    Tensor::from_vec(a.shape(), a.as_array().iter().copied().collect()).map_err(py_err)
}

fn masks_arg(obj: &Bound<'_, PyAny>) -> PyResult<MaskSet> {
    let (shape, data): (Vec<usize>, Vec<f64>) = if let Ok(a) = obj.extract::<PyReadonlyArrayDyn<'_, u8>>() {
        (a.shape().to_vec(), a.as_array().iter().map(|&v| v as f64).collect())
    } else if let Ok(a) = obj.extract::<PyReadonlyArrayDyn<'_, bool>>() {
        (a.shape().to_vec(), a.as_array().iter().map(|&v| v as u8 as f64).collect())
    } else if let Ok(a) = obj.extract::<PyReadonlyArrayDyn<'_, f64>>() {
        (a.shape().to_vec(), a.as_array().iter().copied().collect())
    } else {
        return Err(PyValueError::new_err("masks must be a uint8, bool or float64 array of shape (B, H, W)"));
    };
    MaskSet::from_tensor(&Tensor::from_vec(&shape, data).map_err(py_err)?).map_err(py_err)
}

fn to_array<'py, T: numpy::Element>(py: Python<'py>, shape: &[usize], data: Vec<T>) -> PyResult<Bound<'py, PyArrayDyn<T>>> {
    PyArray1::from_vec(py, data).reshape(shape.to_vec())
}

fn tensor_out<'py>(py: Python<'py>, t: &Tensor<f64>) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
    to_array(py, t.shape(), t.data().to_vec())
}

/// Random binary masks of shape `(frames, height, width)`.
#[pyfunction]
#[pyo3(signature = (frames, height, width, density = 0.5, seed = 0))]
fn generate_masks(py: Python<'_>, frames: usize, height: usize, width: usize, density: f64, seed: u64) -> PyResult<Bound<'_, PyArrayDyn<u8>>> {
    let m = forward::generate_masks(frames, height, width, density, seed).map_err(py_err)?;
    to_array(py, &m.shape(), m.bytes().to_vec())
}

/// `y = sum_i M_i * X_i`.
#[pyfunction]
fn compress<'py>(py: Python<'py>, x: PyReadonlyArrayDyn<'py, f64>, masks: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
    let x = VideoBlock::new(tensor_arg(&x)?).map_err(py_err)?;
    let y = forward::compress(&x, &masks_arg(masks)?, None).map_err(py_err)?;
    tensor_out(py, y.tensor())
}

#[pyfunction]
fn adjoint<'py>(py: Python<'py>, y: PyReadonlyArrayDyn<'py, f64>, masks: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
    let y = Measurement::new(tensor_arg(&y)?).map_err(py_err)?;
    let x = forward::adjoint(&y, &masks_arg(masks)?).map_err(py_err)?;
    tensor_out(py, x.tensor())
}

/// The measurement divided by the mask sum, zero where no mask is open.
#[pyfunction]
fn normalize_measurement<'py>(py: Python<'py>, y: PyReadonlyArrayDyn<'py, f64>, masks: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
    let y = Measurement::new(tensor_arg(&y)?).map_err(py_err)?;
    let n = forward::normalize_measurement(&y, &masks_arg(masks)?).map_err(py_err)?;
    tensor_out(py, n.tensor())
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: PyReadonlyArrayDyn<'_, f64>, b: PyReadonlyArrayDyn<'_, f64>, peak: f64) -> PyResult<f64> {
    let (a, b) = (tensor_arg(&a)?, tensor_arg(&b)?);
    b.ensure_shape(a.shape()).map_err(py_err)?;
    eval::psnr(a.data(), b.data(), peak).map_err(py_err)
}

/// SSIM of two 2-D images with the standard 11x11 Gaussian window.
#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn ssim(a: PyReadonlyArrayDyn<'_, f64>, b: PyReadonlyArrayDyn<'_, f64>, peak: f64) -> PyResult<f64> {
    let params = SsimParams { peak, ..SsimParams::default() };
    eval::ssim(&tensor_arg(&a)?, &tensor_arg(&b)?, &params).map_err(py_err)
}

#[pyfunction]
fn read_tensor(py: Python<'_>, path: std::path::PathBuf) -> PyResult<Bound<'_, PyArrayDyn<f64>>> {
    tensor_out(py, &io::read_tensor::<f64>(&path).map_err(py_err)?)
}

/// Writes a float64 array; `dtype="f32"` stores single precision.
#[pyfunction]
#[pyo3(signature = (path, array, dtype = "f64"))]
fn write_tensor(path: std::path::PathBuf, array: PyReadonlyArrayDyn<'_, f64>, dtype: &str) -> PyResult<()> {
    let t = tensor_arg(&array)?;
    match dtype {
        "f64" => io::write_tensor(&path, &t),
        "f32" => io::write_tensor(&path, &t.cast::<f32>()),
        other => return Err(PyValueError::new_err(format!("dtype must be f32 or f64, got {other:?}"))),
    }
    .map_err(py_err)
}

/// Learning rate at `epoch` for a training config given as JSON.
#[pyfunction]
#[pyo3(signature = (epoch, training_json = None))]
fn lr_schedule(epoch: usize, training_json: Option<&str>) -> PyResult<f64> {
    let cfg: TrainingConfig = match training_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainingConfig::default(),
    };
    train::lr_schedule(epoch, &cfg).map_err(py_err)
}

/// An unfolding network with single-precision weights.
#[pyclass(module = "sci_unfold_py")]
struct Network {
    reg: ParameterRegistry<f32>,
}

#[pymethods]
impl Network {
    /// `config_json` holds network fields (`phases`, `widths`, ...); missing
    /// fields take their defaults.
    #[new]
    #[pyo3(signature = (config_json = None, seed = 0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: NetworkConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => NetworkConfig::default(),
        };
        Ok(Self { reg: ParameterRegistry::new(&cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self { reg: checkpoint::load_network(&path).map_err(py_err)? })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.reg).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.reg.num_params()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.reg.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn parameter_names(&self) -> Vec<String> {
        let s = self.reg.store();
        s.ids().map(|id| s.name(id).to_string()).collect()
    }

    /// Step size of phase `k` (1-based).
    fn eta(&self, k: usize) -> PyResult<f64> {
        if k == 0 || k > self.reg.config().phases {
            return Err(PyValueError::new_err(format!("phase {k} is outside 1..={}", self.reg.config().phases)));
        }
        Ok(self.reg.eta(k) as f64)
    }

    /// Reconstructs a `(B, H, W)` block from a `(H, W)` measurement.
    fn reconstruct<'py>(&self, py: Python<'py>, y: PyReadonlyArrayDyn<'py, f64>, masks: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
        let y = Measurement::new(tensor_arg(&y)?.cast::<f32>()).map_err(py_err)?;
        let m = masks_arg(masks)?;
        let x = py.detach(|| sci_unfold::network::reconstruct(&y, &m, &self.reg, self.reg.config())).map_err(py_err)?;
        tensor_out(py, &x.tensor().cast::<f64>())
    }

    /// Trains on an `(N, B, H, W)` array of clips; returns the per-epoch losses.
    #[pyo3(signature = (clips, masks, training_json = None))]
    fn train(&mut self, py: Python<'_>, clips: PyReadonlyArrayDyn<'_, f64>, masks: &Bound<'_, PyAny>, training_json: Option<&str>) -> PyResult<Vec<f64>> {
        let cfg: TrainingConfig = match training_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => TrainingConfig::default(),
        };
        let all = tensor_arg(&clips)?;
        if all.shape().len() != 4 {
            return Err(PyValueError::new_err(format!("clips must be (N, B, H, W), got {:?}", all.shape())));
        }
        let shape = all.shape()[1..].to_vec();
        let n = shape.iter().product::<usize>();
        let records = (0..all.dim(0))
            .map(|i| {
                let t = Tensor::from_vec(&shape, all.data()[i * n..(i + 1) * n].iter().map(|&v| v as f32).collect())?;
                Ok(ClipRecord { ground_truth: VideoBlock::new(t)?, source: format!("array{i}"), frame_offset: 0, crop: [0, 0], rotation: 0 })
            })
            .collect::<Result<Vec<_>, SciError>>()
            .map_err(py_err)?;
        let m = masks_arg(masks)?;
        let init = self.reg.clone();
        let out = py.detach(|| train::train_clips(&records, &[], &cfg, init, &m, None)).map_err(py_err)?;
        self.reg = out.registry;
        Ok(out.log.iter().filter(|r| r.clips.is_none()).map(|r| r.loss).collect())
    }

    fn __repr__(&self) -> String {
        let c = self.reg.config();
        format!("Network(phases={}, widths={:?}, conv_mode={:?}, params={})", c.phases, c.widths, c.conv_mode, self.reg.num_params())
    }
}

#[pymodule]
pub fn sci_unfold_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(generate_masks, m)?)?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add_function(wrap_pyfunction!(adjoint, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_measurement, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    Ok(())
}
