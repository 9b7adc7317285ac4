//! Python bindings. Structured results (metrics, histories, detections)
//! come back as plain dicts and lists.

use std::path::PathBuf;

use neoc_core::corpus::{
    generate_synthetic_corpus, stratified_split, ClutterSpec, CorpusManifest, DirSource, GlyphKind, SplitParams,
    SynthSpec,
};
use neoc_core::detect::{detect_objects, DetectParams, NmsParams};
use neoc_core::eval::{evaluate as evaluate_model, ConfusionMatrix, Metrics};
use neoc_core::geometry::{iou as rect_iou, Rect};
use neoc_core::model::{checkpoint_digest, load_checkpoint, save_checkpoint, ArchitectureConfig, Model};
use neoc_core::taxonomy::{ClassId, Taxonomy};
use neoc_core::trainer::{train_from_scratch, Dataset, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn ids(names: &[String]) -> Vec<ClassId> {
    names.iter().map(|n| ClassId::new(n)).collect()
}

#[pyclass(name = "Manifest", module = "neoc")]
struct PyManifest {
    inner: CorpusManifest,
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = CorpusManifest::read(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CorpusManifest::from_jsonl(text).map_err(value_error)?,
        })
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn classes(&self) -> Vec<String> {
        self.inner.classes().iter().map(|c| c.to_string()).collect()
    }

    fn histogram(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.histogram())
    }

    fn samples(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.samples)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Taxonomy", module = "neoc")]
struct PyTaxonomy {
    inner: Taxonomy,
}

#[pymethods]
impl PyTaxonomy {
    #[new]
    fn new() -> Self {
        Self { inner: Taxonomy::new() }
    }

    #[staticmethod]
    fn flat(names: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: Taxonomy::flat(&names).map_err(value_error)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Taxonomy::from_json(text).map_err(value_error)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[pyo3(signature = (display, parent=None))]
    fn add_class(&mut self, display: &str, parent: Option<String>) -> PyResult<String> {
        let parent = parent.map(|p| ClassId::new(&p));
        let id = self.inner.add_class(display, parent.as_ref()).map_err(value_error)?;
        Ok(id.to_string())
    }

    fn classes(&self) -> Vec<String> {
        self.inner.classes().iter().map(|c| c.to_string()).collect()
    }

    fn ancestors(&self, class: &str) -> PyResult<Vec<String>> {
        let chain = self.inner.ancestors(&ClassId::new(class)).map_err(value_error)?;
        Ok(chain.iter().map(|c| c.to_string()).collect())
    }

    fn rollup(&self, class: &str, depth: usize) -> PyResult<String> {
        Ok(self.inner.rollup(&ClassId::new(class), depth).map_err(value_error)?.to_string())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", module = "neoc")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    /// Untrained model for square `input_side` inputs.
    #[staticmethod]
    #[pyo3(signature = (class_names, input_side=32, seed=0))]
    fn build(class_names: Vec<String>, input_side: usize, seed: u64) -> PyResult<Self> {
        let arch = ArchitectureConfig::desk_with_input(input_side, class_names.len());
        let mut inner = Model::build(arch, seed).map_err(value_error)?;
        inner.class_names = class_names;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(value_error)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(value_error)
    }

    /// sha256 of the checkpoint bytes.
    fn digest(&self) -> PyResult<String> {
        Ok(checkpoint_digest(&self.inner.to_checkpoint_bytes().map_err(value_error)?))
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Whole-image prediction for a PPM file: `(class, probability)`.
    fn classify(&self, path: PathBuf) -> PyResult<(String, f64)> {
        let image = load_image(&path)?;
        let (class, p) = neoc_core::detect::classify_image(&self.inner, &image).map_err(value_error)?;
        Ok((class.to_string(), p))
    }
}

fn load_image(path: &std::path::Path) -> PyResult<neoc_core::corpus::ImageRecord> {
    let bytes = std::fs::read(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    neoc_core::corpus::decode_ppm(&bytes).map_err(value_error)
}

/// Writes a synthetic glyph corpus to `out_dir` and returns its size.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=42, classes=None, images_per_class=200, size=32, cluttered=false))]
fn synth_corpus(
    out_dir: PathBuf,
    seed: u64,
    classes: Option<Vec<String>>,
    images_per_class: usize,
    size: usize,
    cluttered: bool,
) -> PyResult<usize> {
    let mut spec = SynthSpec {
        images_per_class,
        size,
        clutter: cluttered.then(ClutterSpec::default),
        ..SynthSpec::default()
    };
    if let Some(names) = classes {
        spec.classes = names
            .iter()
            .map(|n| {
                GlyphKind::ALL
                    .into_iter()
                    .find(|g| g.name() == n)
                    .ok_or_else(|| value_error(format!("unknown glyph class `{n}`")))
            })
            .collect::<PyResult<_>>()?;
    }
    let corpus = generate_synthetic_corpus(&spec, seed);
    corpus.write(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(corpus.manifest.len())
}

/// Stratified split: `(train, test, non_computable_classes)`.
#[pyfunction]
#[pyo3(signature = (manifest, test_ratio=0.2, seed=0, group_by_artifact=true))]
fn split(
    manifest: &PyManifest,
    test_ratio: f64,
    seed: u64,
    group_by_artifact: bool,
) -> PyResult<(PyManifest, PyManifest, Vec<String>)> {
    let params = SplitParams {
        test_ratio,
        seed,
        group_by_artifact,
    };
    let out = stratified_split(&manifest.inner, &params).map_err(value_error)?;
    Ok((
        PyManifest { inner: out.train },
        PyManifest { inner: out.test },
        out.non_computable.iter().map(|c| c.to_string()).collect(),
    ))
}

/// Trains a fresh model on `train` and returns `(model, history)`.
#[pyfunction]
#[pyo3(signature = (train, corpus_root, input_side=32, epochs=5, seed=0, lr=0.01, test=None))]
fn train(
    py: Python<'_>,
    train: &PyManifest,
    corpus_root: PathBuf,
    input_side: usize,
    epochs: usize,
    seed: u64,
    lr: f64,
    test: Option<&PyManifest>,
) -> PyResult<(PyModel, Py<PyAny>)> {
    let source = DirSource::new(corpus_root);
    let classes = train.inner.classes();
    let size = (input_side, input_side);
    let train_set = Dataset::load(&train.inner, &source, &classes, size).map_err(value_error)?;
    let test_set = test
        .map(|t| Dataset::load(&t.inner, &source, &classes, size))
        .transpose()
        .map_err(value_error)?;
    let config = TrainConfig {
        epochs,
        seed,
        lr,
        ..TrainConfig::default()
    };
    let arch = ArchitectureConfig::desk_with_input(input_side, classes.len());
    let (model, history) = py
        .detach(|| train_from_scratch::<f32>(arch, &train_set, &config, test_set.as_ref()))
        .map_err(value_error)?;
    Ok((PyModel { inner: model }, to_py(py, &history.records)?))
}

/// Metrics report for `model` on `manifest` as a dict.
#[pyfunction]
#[pyo3(signature = (model, manifest, corpus_root, non_computable=Vec::new()))]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    manifest: &PyManifest,
    corpus_root: PathBuf,
    non_computable: Vec<String>,
) -> PyResult<Py<PyAny>> {
    let source = DirSource::new(corpus_root);
    let (report, _) = evaluate_model(&model.inner, &manifest.inner, &source, &ids(&non_computable), None, None)
        .map_err(value_error)?;
    to_py(py, &report)
}

/// Metrics of a confusion matrix given as rows of counts (truth by prediction).
#[pyfunction]
#[pyo3(signature = (classes, counts, excluded=Vec::new()))]
fn metrics_from_counts(
    py: Python<'_>,
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
    excluded: Vec<String>,
) -> PyResult<Py<PyAny>> {
    let cm = ConfusionMatrix::from_counts(ids(&classes), counts).map_err(value_error)?;
    let metrics = Metrics::from_confusion(cm, &ids(&excluded)).map_err(value_error)?;
    to_py(py, &metrics)
}

/// Sliding-window detection on one PPM image.
#[pyfunction]
#[pyo3(signature = (model, path, scales=None, stride_fraction=0.25, iou_threshold=0.5, score_threshold=0.3))]
fn detect(
    py: Python<'_>,
    model: &PyModel,
    path: PathBuf,
    scales: Option<Vec<usize>>,
    stride_fraction: f64,
    iou_threshold: f64,
    score_threshold: f64,
) -> PyResult<Py<PyAny>> {
    let image = load_image(&path)?;
    let params = DetectParams {
        scales,
        stride_fraction,
        nms: NmsParams {
            iou_threshold,
            score_threshold,
            per_class: false,
        },
    };
    let found = detect_objects(&model.inner, &image, &params).map_err(value_error)?;
    to_py(py, &found)
}

/// Intersection over union of two `(x, y, w, h)` rectangles.
#[pyfunction]
fn iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    rect_iou(&Rect::new(a.0, a.1, a.2, a.3), &Rect::new(b.0, b.1, b.2, b.3))
}

/// Finite-difference checks of every layer over `seeds` seeds.
#[pyfunction]
#[pyo3(signature = (seeds=3))]
fn gradcheck(py: Python<'_>, seeds: u64) -> PyResult<Py<PyAny>> {
    let results = neoc_core::tensor::gradcheck::run_suite(0..seeds);
    let rows: Vec<serde_json::Value> = results
        .iter()
        .map(|r| {
            serde_json::json!({
                "target": r.target,
                "layer": r.layer,
                "precision": r.precision,
                "seed": r.seed,
                "max_rel_error": r.max_rel_error,
                "passed": r.passed(),
            })
        })
        .collect();
    to_py(py, &rows)
}

/// Runs the command-line tool in-process; returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("neoc".to_string()).chain(args).collect();
    py.detach(|| neoc_core::cli::run(argv))
}

/// Loads a PPM file as `(width, height, rgb_bytes)`.
#[pyfunction]
fn read_ppm(path: PathBuf) -> PyResult<(usize, usize, Vec<u8>)> {
    let image = load_image(&path)?;
    Ok((image.width(), image.height(), image.pixels().to_vec()))
}

#[pymodule]
fn neoc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyManifest>()?;
    m.add_class::<PyTaxonomy>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_from_counts, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(read_ppm, m)?)?;
    Ok(())
}
