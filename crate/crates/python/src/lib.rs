//! Python bindings: box geometry, losses, metrics, the detector and the
//! train/evaluate/ablate/synth commands.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use mitodet::config::RunConfig;
use mitodet::eval::MatchFlag;
use mitodet::geometry::{self, BBox, BoxDelta};
use mitodet::model::{Detection, Detector, ModelConfig, PredictParams};
use mitodet::raster::Image;
use mitodet::{cli, eval, losses};

type Box4 = (f64, f64, f64, f64);

fn err(e: mitodet::Error) -> PyErr {
    PyValueError::new_err(cli::error_line(&e))
}

fn bbox(b: Box4) -> PyResult<BBox> {
    BBox::new(b.0, b.1, b.2, b.3).map_err(err)
}

fn tuple(b: &BBox) -> Box4 {
    (b.x1, b.y1, b.x2, b.y2)
}

/// Converts any serialisable value to plain Python objects through JSON.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn load_config(config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<RunConfig> {
    match config {
        Some(p) => RunConfig::load(&p, &overrides),
        None => RunConfig::from_toml_with("", &overrides),
    }
    .map_err(err)
}

#[pyfunction]
fn iou(a: Box4, b: Box4) -> PyResult<f64> {
    Ok(geometry::iou(&bbox(a)?, &bbox(b)?))
}

#[pyfunction]
fn encode(gt: Box4, anchor: Box4) -> PyResult<(f64, f64, f64, f64)> {
    let d = geometry::encode(&bbox(gt)?, &bbox(anchor)?).map_err(err)?;
    Ok((d.dx, d.dy, d.dw, d.dh))
}

#[pyfunction]
fn decode(delta: (f64, f64, f64, f64), anchor: Box4) -> PyResult<Box4> {
    let d = BoxDelta { dx: delta.0, dy: delta.1, dw: delta.2, dh: delta.3 };
    Ok(tuple(&geometry::decode(&d, &bbox(anchor)?).map_err(err)?))
}

#[pyfunction]
fn nms(boxes: Vec<Box4>, scores: Vec<f64>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let items = boxes.into_iter().zip(scores).map(|(b, s)| Ok((bbox(b)?, s))).collect::<PyResult<Vec<_>>>()?;
    Ok(geometry::nms(&items, iou_threshold))
}

/// Anchors of the default configuration for a `width x height` input.
#[pyfunction]
fn generate_anchors(width: usize, height: usize) -> PyResult<Vec<Box4>> {
    let set = geometry::generate_anchors(width, height, &geometry::AnchorConfig::default()).map_err(err)?;
    Ok(set.flat().iter().map(tuple).collect())
}

#[pyfunction]
fn cross_entropy(probs: Vec<f64>, true_class: usize) -> PyResult<f64> {
    losses::cross_entropy(&probs, true_class).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (p_c, alpha_c = 0.25, gamma = 2.0))]
fn focal_loss(p_c: f64, alpha_c: f64, gamma: f64) -> PyResult<f64> {
    losses::focal_loss(p_c, alpha_c, gamma).map_err(err)
}

#[pyfunction]
fn smooth_l1(x: f64) -> f64 {
    losses::smooth_l1(x)
}

/// All-points AP of a ranked list of true-positive flags.
#[pyfunction]
fn average_precision(flags: Vec<bool>, n_gt: usize) -> f64 {
    let flags: Vec<MatchFlag> =
        flags.into_iter().map(|tp| if tp { MatchFlag::TruePositive } else { MatchFlag::FalsePositive }).collect();
    eval::average_precision(&flags, n_gt)
}

fn detections(dets: Vec<(Box4, f64)>) -> PyResult<Vec<Detection>> {
    dets.into_iter().map(|(b, score)| Ok(Detection { bbox: bbox(b)?, score })).collect()
}

/// Greedy matching; returns `(tp, fp, fn)`.
#[pyfunction]
#[pyo3(signature = (dets, gts, iou_threshold = 0.5))]
fn match_detections(dets: Vec<(Box4, f64)>, gts: Vec<Box4>, iou_threshold: f64) -> PyResult<(usize, usize, usize)> {
    let gts = gts.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
    let m = eval::match_detections(&detections(dets)?, &gts, iou_threshold);
    Ok((m.tp, m.fp, m.fn_))
}

/// `(precision, recall, f1)` from pooled counts.
#[pyfunction]
fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let f = eval::F1Score::from_counts(tp, fp, fn_);
    (f.precision, f.recall, f.f1)
}

#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(err)
}

#[pyfunction]
#[pyo3(signature = (out_dir, n_cases = 200, seed = 0, image_size = 128))]
fn synth(py: Python<'_>, out_dir: PathBuf, n_cases: usize, seed: u64, image_size: usize) -> PyResult<Bound<'_, PyAny>> {
    let summary = py.detach(|| cli::cmd_synth(n_cases, seed, image_size, &out_dir)).map_err(err)?;
    to_py(py, &summary)
}

#[pyfunction]
#[pyo3(signature = (config = None, overrides = Vec::new()))]
fn train(py: Python<'_>, config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Bound<'_, PyAny>> {
    let cfg = load_config(config, overrides)?;
    let summary = py.detach(|| cli::cmd_train(&cfg)).map_err(err)?;
    to_py(py, &summary)
}

#[pyfunction]
#[pyo3(signature = (checkpoint, config = None, overrides = Vec::new(), split = "test"))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    config: Option<PathBuf>,
    overrides: Vec<String>,
    split: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load_config(config, overrides)?;
    let split = match split {
        "train" => cli::Split::Train,
        "val" => cli::Split::Val,
        "test" => cli::Split::Test,
        other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
    };
    let opts = cli::EvaluateOptions { split: Some(split), score_threshold: None };
    let report = py.detach(|| cli::cmd_evaluate(&cfg, &checkpoint, opts)).map_err(err)?;
    to_py(py, &report)
}

/// Runs the ablation and returns the table as CSV text.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = Vec::new()))]
fn ablate(py: Python<'_>, config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<String> {
    let cfg = load_config(config, overrides)?;
    let rows = py.detach(|| cli::cmd_ablate(&cfg)).map_err(err)?;
    Ok(eval::ablation_csv(&rows))
}

#[pyclass(name = "Detector")]
struct PyDetector {
    inner: Detector,
}

#[pymethods]
impl PyDetector {
    /// Freshly initialised tiny-backbone detector.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        Ok(PyDetector { inner: Detector::new(ModelConfig::default(), seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let (inner, _) = mitodet::model::load_checkpoint(&checkpoint, None).map_err(err)?;
        Ok(PyDetector { inner })
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Detections on an image given as row-major RGB samples in `[0, 1]`.
    #[pyo3(signature = (pixels, width, height, score_thr = 0.05, nms_thr = 0.5, max_dets = 100))]
    fn predict(
        &self,
        pixels: Vec<f32>,
        width: usize,
        height: usize,
        score_thr: f64,
        nms_thr: f64,
        max_dets: usize,
    ) -> PyResult<Vec<(Box4, f64)>> {
        let image = Image::new(width, height, pixels).map_err(err)?;
        image.check_range().map_err(err)?;
        let params = PredictParams { score_thr, nms_thr, max_dets, ..PredictParams::default() };
        let dets = self.inner.predict(&image, &params).map_err(err)?;
        Ok(dets.iter().map(|d| (tuple(&d.bbox), d.score)).collect())
    }

    /// Detections on an image file.
    #[pyo3(signature = (path, score_thr = 0.05))]
    fn predict_file(&self, path: PathBuf, score_thr: f64) -> PyResult<Vec<(Box4, f64)>> {
        let image = Image::load(&path).map_err(err)?;
        let params = PredictParams { score_thr, ..PredictParams::default() };
        let dets = self.inner.predict(&image, &params).map_err(err)?;
        Ok(dets.iter().map(|d| (tuple(&d.bbox), d.score)).collect())
    }

    /// Per-level anchor counts for an input size.
    fn level_counts(&self, width: usize, height: usize) -> PyResult<Vec<usize>> {
        let image = Image::filled(width, height, [0.5; 3]);
        Ok(self.inner.forward_image(&image).map_err(err)?.level_counts)
    }
}

#[pymodule]
fn mitodet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(generate_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(match_detections, m)?)?;
    m.add_function(wrap_pyfunction!(f1_from_counts, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    Ok(())
}
