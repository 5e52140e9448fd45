//! Python bindings: tensors as nested lists, reports as dicts.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use splitcut::attacks::mad_z_detector;
use splitcut::bottleneck::{init_projection_with, BasisInit, ProjectionBasis};
use splitcut::config::{parse_config, ExperimentConfig};
use splitcut::metrics::{image_metrics, ssim, ImageView};
use splitcut::runner::{compare, run, RunReport};
use splitcut::transport::{decode, encode, MsgType, WireMessage};
use splitcut::wcc::{wcc_grad, wcc_loss};
use splitcut::{RngStream, Tensor};

create_exception!(pysplitcut, SplitcutError, PyException);

fn err(e: splitcut::Error) -> PyErr {
    SplitcutError::new_err(e.to_string())
}

/// `[b, n]` tensor from a list of equal-length rows.
pub fn rows_to_tensor(rows: &[Vec<f32>]) -> splitcut::Result<Tensor> {
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(splitcut::Error::InvalidArgument("rows have different lengths".into()));
    }
    Tensor::new(vec![rows.len(), n], rows.concat())
}

pub fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f32>> {
    (0..t.batch()).map(|i| t.row(i).to_vec()).collect()
}

pub fn msg_type_from_name(name: &str) -> splitcut::Result<MsgType> {
    [MsgType::SetupR, MsgType::ZFwd, MsgType::UFwd, MsgType::GradU, MsgType::GradZ]
        .into_iter()
        .find(|m| m.name().eq_ignore_ascii_case(name))
        .ok_or_else(|| splitcut::Error::InvalidArgument(format!("unknown message type {name}")))
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Orthonormal `d x k` projection basis.
#[pyclass(name = "ProjectionBasis")]
struct PyBasis {
    inner: ProjectionBasis,
}

#[pymethods]
impl PyBasis {
    #[new]
    #[pyo3(signature = (d, k, seed, init = "gaussian"))]
    fn new(d: usize, k: usize, seed: u64, init: &str) -> PyResult<Self> {
        let init = match init {
            "gaussian" => BasisInit::Gaussian,
            "uniform" => BasisInit::Uniform,
            other => return Err(SplitcutError::new_err(format!("unknown basis init {other}"))),
        };
        let inner = init_projection_with(d, k, &mut RngStream::new(seed), init).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    fn matrix(&self) -> Vec<Vec<f32>> {
        tensor_to_rows(self.inner.matrix())
    }

    fn project(&self, rows: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let z = rows_to_tensor(&rows).map_err(err)?;
        Ok(tensor_to_rows(&self.inner.project(&z).map_err(err)?))
    }

    fn lift(&self, rows: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let z = rows_to_tensor(&rows).map_err(err)?;
        Ok(tensor_to_rows(&self.inner.lift_fixed(&z).map_err(err)?))
    }

    /// `SETUP_R` frame carrying this basis.
    fn setup_frame<'py>(&self, py: Python<'py>, client_id: u32) -> PyResult<Bound<'py, PyBytes>> {
        let msg = WireMessage::setup(client_id, self.inner.matrix(), self.inner.seed()).map_err(err)?;
        Ok(PyBytes::new(py, &encode(&msg).map_err(err)?))
    }
}

#[pyfunction(name = "wcc_loss")]
fn py_wcc_loss(rows: Vec<Vec<f32>>, labels: Vec<usize>) -> PyResult<f32> {
    wcc_loss(&rows_to_tensor(&rows).map_err(err)?, &labels).map_err(err)
}

#[pyfunction(name = "wcc_grad")]
fn py_wcc_grad(rows: Vec<Vec<f32>>, labels: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
    let g = wcc_grad(&rows_to_tensor(&rows).map_err(err)?, &labels).map_err(err)?;
    Ok(tensor_to_rows(&g))
}

/// Encodes a data frame (`Z_FWD`, `U_FWD`, `GRAD_U`, `GRAD_Z`).
#[pyfunction]
fn encode_frame<'py>(
    py: Python<'py>,
    msg_type: &str,
    client_id: u32,
    step: u64,
    rows: Vec<Vec<f32>>,
) -> PyResult<Bound<'py, PyBytes>> {
    let t = rows_to_tensor(&rows).map_err(err)?;
    let msg = WireMessage::from_tensor(msg_type_from_name(msg_type).map_err(err)?, client_id, step, &t).map_err(err)?;
    Ok(PyBytes::new(py, &encode(&msg).map_err(err)?))
}

/// Decodes exactly one frame into a dict.
#[pyfunction]
fn decode_frame<'py>(py: Python<'py>, frame: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let msg = decode(frame).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("msg_type", msg.msg_type.name())?;
    d.set_item("client_id", msg.client_id)?;
    d.set_item("step", msg.step)?;
    d.set_item("batch", msg.batch)?;
    d.set_item("dim", msg.dim)?;
    if let Some(s) = msg.setup {
        d.set_item("setup", (s.d, s.k, s.seed))?;
    }
    d.set_item("rows", tensor_to_rows(&msg.tensor().map_err(err)?))?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (vectors, truth = Vec::new()))]
fn detect<'py>(py: Python<'py>, vectors: Vec<Vec<f64>>, truth: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
    let r = mad_z_detector(&vectors, &truth).map_err(err)?;
    json_to_py(py, &r.to_json().map_err(err)?)
}

fn view<'a>(data: &'a [f32], shape: (usize, usize, usize)) -> PyResult<ImageView<'a>> {
    ImageView::new(data, shape.0, shape.1, shape.2).map_err(err)
}

/// SSIM of two `[C, H, W]` images given as flat lists.
#[pyfunction(name = "ssim")]
fn py_ssim(a: Vec<f32>, b: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<f64> {
    ssim(&view(&a, shape)?, &view(&b, shape)?).map_err(err)
}

#[pyfunction(name = "image_metrics")]
#[pyo3(signature = (reference, test, shape, mask_threshold = None))]
fn py_image_metrics<'py>(
    py: Python<'py>,
    reference: Vec<f32>,
    test: Vec<f32>,
    shape: (usize, usize, usize),
    mask_threshold: Option<f32>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = image_metrics(&view(&reference, shape)?, &view(&test, shape)?, mask_threshold).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("mse", m.mse)?;
    d.set_item("psnr", m.psnr)?;
    d.set_item("ssim", m.ssim)?;
    d.set_item("mse_fg", m.mse_fg)?;
    d.set_item("psnr_fg", m.psnr_fg)?;
    d.set_item("ssim_fg", m.ssim_fg)?;
    Ok(d)
}

/// Parsed experiment config.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self { inner: parse_config(text).map_err(err)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn hash(&self) -> PyResult<u64> {
        self.inner.hash().map_err(err)
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
    fn cut_dim(&self) -> usize {
        self.inner.cut_dim()
    }

    #[getter]
    fn projection_k(&self) -> usize {
        self.inner.projection_k()
    }
}

/// Runs an experiment and returns its report as a dict.
#[pyfunction(name = "run")]
fn py_run<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let report = py.detach(move || run(&cfg)).map_err(err)?.report;
    json_to_py(py, &report.to_json().map_err(err)?)
}

/// Compares report JSON strings; returns rows and per-method aggregates.
#[pyfunction(name = "compare")]
fn py_compare<'py>(py: Python<'py>, baselines: Vec<String>, reports: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let load = |xs: &[String]| xs.iter().map(|s| RunReport::from_json(s)).collect::<splitcut::Result<Vec<_>>>();
    let c = compare(&load(&baselines).map_err(err)?, &load(&reports).map_err(err)?).map_err(err)?;
    let text = serde_json::to_string(&c).map_err(|e| err(e.into()))?;
    json_to_py(py, &text)
}

#[pymodule]
fn pysplitcut(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SplitcutError", m.py().get_type::<SplitcutError>())?;
    m.add_class::<PyBasis>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(py_wcc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_wcc_grad, m)?)?;
    m.add_function(wrap_pyfunction!(encode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(py_ssim, m)?)?;
    m.add_function(wrap_pyfunction!(py_image_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(py_run, m)?)?;
    m.add_function(wrap_pyfunction!(py_compare, m)?)?;
    Ok(())
}
