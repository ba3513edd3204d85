//! Python bindings. Images cross the boundary as flat row-major lists with
//! interleaved channels; boxes as `BBox` objects or `(x, y, w, h)` tuples.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rgbt_core::bench;
use rgbt_core::cftrack::ResponseMap;
use rgbt_core::config;
use rgbt_core::fusion;
use rgbt_core::geom;
use rgbt_core::img;
use rgbt_core::motion;
use rgbt_core::pipeline::{self, Source};
use rgbt_core::synth;

fn py_err(e: rgbt_core::Error) -> PyErr {
    match e {
        rgbt_core::Error::MissingFile(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        e if e.is_config_error() || e.is_data_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for rgbt_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "BBox", module = "rgbt", frozen, eq, skip_from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct PyBBox {
    inner: geom::BBox,
}

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x: f64, y: f64, w: f64, h: f64) -> PyResult<Self> {
        Ok(PyBBox {
            inner: geom::BBox::new(x, y, w, h).py()?,
        })
    }

    #[getter]
    fn x(&self) -> f64 {
        self.inner.x
    }

    #[getter]
    fn y(&self) -> f64 {
        self.inner.y
    }

    #[getter]
    fn w(&self) -> f64 {
        self.inner.w
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.h
    }

    fn center(&self) -> (f64, f64) {
        let c = self.inner.center();
        (c.x, c.y)
    }

    fn area(&self) -> f64 {
        self.inner.area()
    }

    fn to_tuple(&self) -> (f64, f64, f64, f64) {
        (self.inner.x, self.inner.y, self.inner.w, self.inner.h)
    }

    fn __repr__(&self) -> String {
        format!("BBox({}, {}, {}, {})", self.inner.x, self.inner.y, self.inner.w, self.inner.h)
    }
}

fn boxes_from(list: Vec<(f64, f64, f64, f64)>) -> PyResult<Vec<geom::BBox>> {
    list.into_iter().map(|(x, y, w, h)| geom::BBox::new(x, y, w, h).py()).collect()
}

#[pyfunction]
fn iou(a: &PyBBox, b: &PyBBox) -> f64 {
    geom::iou(&a.inner, &b.inner)
}

#[pyfunction]
fn center_error(a: &PyBBox, b: &PyBBox) -> f64 {
    geom::center_error(&a.inner, &b.inner)
}

#[pyclass(name = "Image", module = "rgbt", skip_from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: img::Image,
}

#[pymethods]
impl PyImage {
    /// `data` holds `width * height * channels` values in `[0, 1]`.
    #[new]
    fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyImage {
            inner: img::Image::new(width, height, channels, data).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyImage {
            inner: img::load_image(&path).py()?,
        })
    }

    #[staticmethod]
    fn load_thermal(path: PathBuf) -> PyResult<Self> {
        Ok(PyImage {
            inner: img::load_thermal(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        img::save_image(&path, &self.inner).py()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn gray(&self) -> Self {
        PyImage {
            inner: img::to_gray(&self.inner),
        }
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}x{})", self.inner.width(), self.inner.height(), self.inner.channels())
    }
}

#[pyfunction]
fn entropy(image: &PyImage) -> f64 {
    fusion::entropy(&image.inner)
}

#[pyfunction]
fn mutual_information(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    fusion::mutual_information(&a.inner, &b.inner).py()
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    fusion::ssim(&a.inner, &b.inner).py()
}

/// Pixel-level fusion with a per-pixel visible weight map (row-major, one
/// value per pixel).
#[pyfunction]
fn fuse_images(rgb: &PyImage, t: &PyImage, weights: Vec<f64>) -> PyResult<PyImage> {
    let wf = ResponseMap::new(rgb.inner.width(), rgb.inner.height(), weights).py()?;
    Ok(PyImage {
        inner: fusion::fuse_images(&rgb.inner, &t.inner, &wf).py()?,
    })
}

/// Late fusion of two response maps given as flat row-major lists.
#[pyfunction]
fn fuse_responses(width: usize, height: usize, r_rgb: Vec<f64>, r_t: Vec<f64>, weights: Vec<f64>) -> PyResult<Vec<f64>> {
    let a = ResponseMap::new(width, height, r_rgb).py()?;
    let b = ResponseMap::new(width, height, r_t).py()?;
    let w = ResponseMap::new(width, height, weights).py()?;
    Ok(fusion::fuse_responses(&a, &b, &w).py()?.data)
}

/// Tracking quality (peak-to-sidelobe ratio times peak) of a response map.
#[pyfunction]
fn quality(width: usize, height: usize, response: Vec<f64>) -> PyResult<f64> {
    Ok(rgbt_core::cftrack::quality(&ResponseMap::new(width, height, response).py()?))
}

#[pyclass(name = "Config", module = "rgbt", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: config::Config,
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overridden by TOML text.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => config::Config::from_toml_str(t).py()?,
            None => config::Config::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: config::Config::load(&path).py()?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// `(q_hi, s_hi, q_low, s_low, t_diff, t_disable, q_skip)`.
    fn thresholds(&self) -> (f64, f64, f64, f64, f64, f64, f64) {
        let t = self.inner.thresholds();
        (t.q_hi, t.s_hi, t.q_low, t.s_low, t.t_diff, t.t_disable, t.q_skip)
    }
}

/// Appearance-versus-motion decision; thresholds default to the configured
/// values.
#[pyfunction]
#[pyo3(signature = (q, s_a, s_m, config = None))]
fn decide(q: f64, s_a: f64, s_m: f64, config: Option<&PyConfig>) -> &'static str {
    let th = config.map(|c| c.inner.thresholds()).unwrap_or_default();
    source_name(pipeline::decide(q, s_a, s_m, &th))
}

fn source_name(s: Source) -> &'static str {
    match s {
        Source::Appearance => "appearance",
        Source::Motion => "motion",
    }
}

#[pyclass(name = "FrameResult", module = "rgbt", frozen)]
struct PyFrameResult {
    inner: pipeline::FrameResult,
}

#[pymethods]
impl PyFrameResult {
    #[getter]
    fn bbox(&self) -> PyBBox {
        PyBBox { inner: self.inner.bbox }
    }

    #[getter]
    fn source(&self) -> &'static str {
        source_name(self.inner.source)
    }

    #[getter]
    fn q(&self) -> Option<f64> {
        self.inner.diagnostics.q
    }

    #[getter]
    fn w_g(&self) -> Option<f64> {
        self.inner.diagnostics.w_g
    }

    #[getter]
    fn suspended(&self) -> bool {
        self.inner.diagnostics.suspended
    }

    /// All per-frame diagnostics as a JSON object string.
    fn diagnostics_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.diagnostics).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        let b = self.inner.bbox;
        format!("FrameResult({}, ({:.2}, {:.2}, {:.2}, {:.2}))", source_name(self.inner.source), b.x, b.y, b.w, b.h)
    }
}

fn frame_results(t: bench::Trajectory) -> Vec<PyFrameResult> {
    t.frames.into_iter().map(|inner| PyFrameResult { inner }).collect()
}

fn load_net(cfg: &config::Config) -> PyResult<Option<Arc<fusion::MfNet>>> {
    Ok(match &cfg.tracker.checkpoint {
        Some(p) => Some(Arc::new(fusion::MfNet::load(p).py()?)),
        None => None,
    })
}

#[pyclass(name = "Tracker", module = "rgbt")]
struct PyTracker {
    inner: pipeline::Tracker,
}

#[pymethods]
impl PyTracker {
    #[new]
    #[pyo3(signature = (rgb, t, init_box, config = None))]
    fn new(rgb: &PyImage, t: &PyImage, init_box: &PyBBox, config: Option<&PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        let net = load_net(&cfg)?;
        Ok(PyTracker {
            inner: pipeline::Tracker::new(&cfg.tracker_config(), &rgb.inner, &t.inner, &init_box.inner, net).py()?,
        })
    }

    fn step(&mut self, rgb: &PyImage, t: &PyImage) -> PyResult<PyFrameResult> {
        Ok(PyFrameResult {
            inner: self.inner.step(&rgb.inner, &t.inner).py()?,
        })
    }

    #[getter]
    fn bbox(&self) -> PyBBox {
        PyBBox { inner: self.inner.bbox() }
    }

    #[getter]
    fn frame_index(&self) -> usize {
        self.inner.frame_index()
    }
}

#[pyclass(name = "Sequence", module = "rgbt")]
struct PySequence {
    inner: bench::Sequence,
}

#[pymethods]
impl PySequence {
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        Ok(PySequence {
            inner: bench::load_sequence(&manifest).py()?,
        })
    }

    /// Renders a synthetic scenario given as JSON.
    #[staticmethod]
    #[pyo3(signature = (scenario_json = None, seed = 0))]
    fn synthetic(scenario_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let sc = match scenario_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("invalid scenario: {e}")))?,
            None => synth::Scenario::default(),
        };
        Ok(PySequence {
            inner: synth::generate(&sc, seed).py()?.0,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn attributes(&self) -> Vec<String> {
        self.inner.attributes.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn frame(&self, i: usize) -> PyResult<(PyImage, PyImage)> {
        if i >= self.inner.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!("frame {i} of {}", self.inner.len())));
        }
        let (rgb, t) = self.inner.frame(i).py()?;
        Ok((PyImage { inner: rgb }, PyImage { inner: t }))
    }

    fn gt_rgb(&self) -> Vec<PyBBox> {
        self.inner.gt_rgb.iter().map(|&inner| PyBBox { inner }).collect()
    }

    fn gt_t(&self) -> Vec<PyBBox> {
        self.inner.gt_t.iter().map(|&inner| PyBBox { inner }).collect()
    }

    /// One-pass evaluation; returns one result per frame.
    #[pyo3(signature = (config = None, ablation = None))]
    fn track(&self, py: Python<'_>, config: Option<&PyConfig>, ablation: Option<&str>) -> PyResult<Vec<PyFrameResult>> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        let mut tc = cfg.tracker_config();
        if let Some(a) = ablation {
            tc.ablation = a.parse().py()?;
        }
        let net = load_net(&cfg)?;
        let seq = &self.inner;
        let traj = py.detach(|| bench::run_ope(seq, &tc, net)).py()?;
        Ok(frame_results(traj))
    }

    /// Maximum success rate (area under the success curve).
    fn msr(&self, boxes: Vec<(f64, f64, f64, f64)>) -> PyResult<f64> {
        Ok(bench::msr(&boxes_from(boxes)?, &self.inner).py()?.auc)
    }

    /// Maximum precision rate at `px` pixels.
    #[pyo3(signature = (boxes, px = 20.0))]
    fn mpr(&self, boxes: Vec<(f64, f64, f64, f64)>, px: f64) -> PyResult<f64> {
        Ok(bench::mpr(&boxes_from(boxes)?, &self.inner, px).py()?.at_threshold)
    }
}

#[pyclass(name = "KalmanFilter", module = "rgbt")]
struct PyKalman {
    inner: motion::KalmanState,
}

#[pymethods]
impl PyKalman {
    #[new]
    fn new(x: f64, y: f64) -> Self {
        PyKalman {
            inner: motion::KalmanState::init(geom::Point::new(x, y)),
        }
    }

    fn predict(&mut self) -> (f64, f64) {
        let p = self.inner.predict();
        (p.x, p.y)
    }

    fn update(&mut self, x: f64, y: f64) -> PyResult<()> {
        self.inner.update(geom::Point::new(x, y)).py()
    }

    /// `[x, vx, y, vy]`.
    fn state(&self) -> [f64; 4] {
        self.inner.state()
    }
}

#[pymodule]
fn rgbt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTracker>()?;
    m.add_class::<PyFrameResult>()?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyKalman>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(center_error, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_images, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_responses, m)?)?;
    m.add_function(wrap_pyfunction!(quality, m)?)?;
    m.add_function(wrap_pyfunction!(decide, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
