//! Python bindings for the unit-atlas workbench.
//!
//! Exposes the main types (datasets, models, activation matrices, grid
//! atlases) and the pipeline operations behind a thin wrapper layer.
//! Structured results cross the boundary as ordinary Python dicts/lists.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use unit_atlas_core::atlas as core_atlas;
use unit_atlas_core::datagen;
use unit_atlas_core::graph::{AblationMask, UnitId};
use unit_atlas_core::pipeline as core_pipeline;
use unit_atlas_core::probe as core_probe;
use unit_atlas_core::store;
use unit_atlas_core::tensor;
use unit_atlas_core::train as core_train;
use unit_atlas_core::Error as CoreError;

fn err(e: CoreError) -> PyErr {
    match e {
        CoreError::Validation(_) | CoreError::Shape { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(match value {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => b.into_pyobject(py)?.to_owned().unbind().into(),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.unbind().into()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.unbind().into()
            }
        }
        serde_json::Value::String(s) => s.into_pyobject(py)?.unbind().into(),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.unbind().into()
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.unbind().into()
        }
    })
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let json = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &json)
}

fn mask_from_pairs(pairs: Vec<(String, usize)>) -> AblationMask {
    AblationMask::from_units(pairs.into_iter().map(|(layer, index)| UnitId { layer, index }))
}

/// Labeled image set (u8 pixels, `[n, ch, y, x]`).
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: store::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: store::Dataset::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn n_images(&self) -> usize {
        self.inner.n_images()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [ch, y, x] = self.inner.shape();
        (ch, y, x)
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<u16> {
        self.inner.labels().to_vec()
    }

    /// Image pixels scaled to [0, 1], flat row-major `[ch, y, x]`.
    fn image(&self, index: usize) -> PyResult<Vec<f32>> {
        if index >= self.inner.n_images() {
            return Err(PyValueError::new_err(format!("image {index} out of range")));
        }
        Ok(self.inner.image_tensor(index).into_data())
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    fn __len__(&self) -> usize {
        self.inner.n_images()
    }

    fn __repr__(&self) -> String {
        let [ch, y, x] = self.inner.shape();
        format!(
            "Dataset(n_images={}, n_classes={}, shape=({ch}, {y}, {x}))",
            self.inner.n_images(),
            self.inner.n_classes()
        )
    }
}

/// Immutable layer DAG with weights.
#[pyclass(name = "Model")]
struct PyModel {
    inner: unit_atlas_core::ModelGraph,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: store::load_model(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        store::save_model(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    /// Maskable layers as `[(layer_id, unit_count), ...]` in model order.
    #[getter]
    fn maskable_layers(&self) -> Vec<(String, usize)> {
        self.inner.maskable_layers().to_vec()
    }

    fn checksum(&self) -> String {
        store::model_checksum_in_memory(&self.inner)
    }

    /// Forward pass.
    ///
    /// `image` is a flat row-major `[ch, y, x]` float list; `mask` is a list
    /// of `(layer_id, unit_index)` pairs; `taps` is a list of maskable layer
    /// ids. Returns `(logits, {layer: flat_activation})`.
    #[pyo3(signature = (image, mask = Vec::new(), taps = Vec::new()))]
    fn forward(
        &self,
        py: Python<'_>,
        image: Vec<f32>,
        mask: Vec<(String, usize)>,
        taps: Vec<String>,
    ) -> PyResult<(Vec<f32>, Py<PyAny>)> {
        let input = tensor::Tensor::new(self.inner.input_shape().to_vec(), image).map_err(err)?;
        let tap_set: BTreeSet<String> = taps.into_iter().collect();
        let result = self
            .inner
            .forward(&input, &mask_from_pairs(mask), &tap_set)
            .map_err(err)?;
        let logits = result.logits().map_err(err)?.to_vec();
        let tapped = PyDict::new(py);
        for (layer, tensor) in &result.taps {
            tapped.set_item(layer, tensor.data().to_vec())?;
        }
        Ok((logits, tapped.unbind().into()))
    }
}

/// Per-image, per-unit scalar activations.
#[pyclass(name = "Activations")]
struct PyActivations {
    inner: core_atlas::ActivationMatrix,
}

#[pymethods]
impl PyActivations {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyActivations {
            inner: core_atlas::ActivationMatrix::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn n_images(&self) -> usize {
        self.inner.n_images()
    }

    #[getter]
    fn n_units(&self) -> usize {
        self.inner.n_units()
    }

    /// Column units as `[(layer_id, index), ...]`.
    #[getter]
    fn units(&self) -> Vec<(String, usize)> {
        self.inner
            .units()
            .iter()
            .map(|u| (u.layer.clone(), u.index))
            .collect()
    }

    fn row(&self, image: usize) -> PyResult<Vec<f32>> {
        if image >= self.inner.n_images() {
            return Err(PyValueError::new_err(format!("row {image} out of range")));
        }
        Ok(self.inner.row(image).to_vec())
    }
}

/// Per-layer equal-count grid assignment for one target class.
#[pyclass(name = "Atlas")]
struct PyAtlas {
    inner: core_atlas::GridAtlas,
}

#[pymethods]
impl PyAtlas {
    #[getter]
    fn target_class(&self) -> u16 {
        self.inner.target_class
    }

    #[getter]
    fn target_name(&self) -> String {
        self.inner.target_name.clone()
    }

    #[getter]
    fn grid(&self) -> (usize, usize) {
        (self.inner.s_strips, self.inner.m_bands)
    }

    #[getter]
    fn layers(&self) -> Vec<String> {
        self.inner
            .eligible_layers()
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn cell_members(&self, layer: &str, strip: usize, band: usize) -> Vec<(String, usize)> {
        self.inner
            .cell_members(layer, strip, band)
            .into_iter()
            .map(|u| (u.layer, u.index))
            .collect()
    }

    /// Full atlas content as a dict (same schema as atlas.json entries).
    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }
}

/// Numerically stable softmax.
#[pyfunction]
fn softmax(logits: Vec<f32>) -> Vec<f32> {
    tensor::softmax(&logits)
}

/// Rank of `class_index` in a softmax output (1 = most likely; ties go to
/// the lower class index).
#[pyfunction]
fn class_rank(probs: Vec<f32>, class_index: usize) -> PyResult<u32> {
    core_probe::class_rank(&probs, class_index).map_err(err)
}

/// Generate a seeded synthetic dataset.
#[pyfunction]
#[pyo3(signature = (n_classes = 8, per_class = 100, height = 32, width = 32, channels = 1, noise = 0.25, seed = 7))]
fn generate_dataset(
    n_classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    channels: usize,
    noise: f32,
    seed: u64,
) -> PyResult<PyDataset> {
    let inner = datagen::generate_dataset(&datagen::DatagenConfig {
        n_classes,
        per_class,
        shape: [channels, height, width],
        noise,
        seed,
    })
    .map_err(err)?;
    Ok(PyDataset { inner })
}

/// Train a desk-scale CNN; returns `(Model, log_dict)`.
#[pyfunction]
#[pyo3(signature = (dataset, arch = "desk", epochs = 30, learning_rate = 0.05, batch_size = 32, l2 = 1e-4, seed = 1, split = 0.8))]
#[allow(clippy::too_many_arguments)]
fn train_model(
    py: Python<'_>,
    dataset: &PyDataset,
    arch: &str,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    l2: f64,
    seed: u64,
    split: f64,
) -> PyResult<(PyModel, Py<PyAny>)> {
    let arch: core_train::ArchTemplate = arch.parse().map_err(err)?;
    let cfg = core_train::TrainConfig {
        learning_rate,
        epochs,
        batch_size,
        l2,
        seed,
        split,
    };
    let (model, log) = core_train::train_model(arch, &dataset.inner, &cfg).map_err(err)?;
    Ok((PyModel { inner: model }, to_py(py, &log)?))
}

/// Capture per-unit scalar activations for every image.
#[pyfunction]
#[pyo3(signature = (model, dataset, mask = Vec::new()))]
fn capture_activations(
    model: &PyModel,
    dataset: &PyDataset,
    mask: Vec<(String, usize)>,
) -> PyResult<PyActivations> {
    let inner =
        core_atlas::capture_activations(&model.inner, &dataset.inner, &mask_from_pairs(mask))
            .map_err(err)?;
    Ok(PyActivations { inner })
}

/// Per-unit selectivity/magnitude stats plus the equal-count grid.
#[pyfunction]
#[pyo3(signature = (acts, target_class, s = 4, m = 4, magnitude_mode = "rotated", comparison_subsample = None, seed = 0))]
fn build_atlas(
    acts: &PyActivations,
    target_class: &str,
    s: usize,
    m: usize,
    magnitude_mode: &str,
    comparison_subsample: Option<usize>,
    seed: u64,
) -> PyResult<PyAtlas> {
    let mode: core_atlas::MagnitudeMode = magnitude_mode.parse().map_err(err)?;
    let target = acts.inner.resolve_class(target_class).map_err(err)?;
    let comparison = match comparison_subsample {
        Some(k) => core_atlas::ComparisonClasses::Subsample(k),
        None => core_atlas::ComparisonClasses::AllOthers,
    };
    let inner = core_atlas::build_atlas(
        &acts.inner,
        target,
        acts.inner.class_name(target),
        comparison,
        seed,
        mode,
        s,
        m,
    )
    .map_err(err)?;
    Ok(PyAtlas { inner })
}

/// Unablated per-image ranks of each image's own class.
#[pyfunction]
fn baseline_ranks(model: &PyModel, dataset: &PyDataset) -> PyResult<Vec<u32>> {
    Ok(core_probe::baseline_ranks(&model.inner, &dataset.inner)
        .map_err(err)?
        .ranks)
}

/// Probe and ablate every cell of an atlas; returns a list of cell dicts.
#[pyfunction]
#[pyo3(signature = (model, dataset, acts, atlas, split = 0.8, l2 = 1e-3, iterations = 500, learning_rate = 0.1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn run_all_cells(
    py: Python<'_>,
    model: &PyModel,
    dataset: &PyDataset,
    acts: &PyActivations,
    atlas: &PyAtlas,
    split: f64,
    l2: f64,
    iterations: usize,
    learning_rate: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let baseline = core_probe::baseline_ranks(&model.inner, &dataset.inner).map_err(err)?;
    let cfg = core_probe::ProbeConfig {
        split,
        seed,
        l2,
        iterations,
        learning_rate,
    };
    let outcomes = core_probe::run_all_cells(
        &model.inner,
        &dataset.inner,
        &acts.inner,
        &atlas.inner,
        &baseline,
        &cfg,
    )
    .map_err(err)?;
    to_py(py, &outcomes)
}

/// Run the full pipeline (capture, atlas, probes + ablations, reports).
///
/// Accepts either `config_path` to a JSON config or explicit keyword
/// arguments; returns a summary dict with the per-target cell results.
#[pyfunction]
#[pyo3(signature = (model, dataset, out, target_classes = Vec::new(), grid = "4x4", magnitude_mode = "rotated", comparison_subsample = None, seed = 0, workers = 0))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    py: Python<'_>,
    model: PathBuf,
    dataset: PathBuf,
    out: PathBuf,
    target_classes: Vec<String>,
    grid: &str,
    magnitude_mode: &str,
    comparison_subsample: Option<usize>,
    seed: u64,
    workers: usize,
) -> PyResult<Py<PyAny>> {
    let cfg = core_pipeline::RunConfig {
        model,
        dataset,
        out,
        target_classes,
        grid: grid.parse().map_err(err)?,
        magnitude_mode: magnitude_mode.parse().map_err(err)?,
        comparison_subsample,
        probe: core_pipeline::ProbeSettings::default(),
        seed,
        workers,
    };
    let summary = core_pipeline::pipeline_run(&cfg).map_err(err)?;
    let doc = serde_json::json!({
        "out": summary.out,
        "runs": summary.results.runs,
        "model_checksum": summary.results.meta.model_checksum,
        "dataset_checksum": summary.results.meta.dataset_checksum,
    });
    json_to_py(py, &doc)
}

/// Run the full pipeline from a JSON config file (strict parsing).
#[pyfunction]
fn run_pipeline_config(py: Python<'_>, config_path: PathBuf) -> PyResult<Py<PyAny>> {
    let cfg = core_pipeline::RunConfig::load(&config_path).map_err(err)?;
    let summary = core_pipeline::pipeline_run(&cfg).map_err(err)?;
    let doc = serde_json::json!({
        "out": summary.out,
        "runs": summary.results.runs,
    });
    json_to_py(py, &doc)
}

#[pymodule]
fn unit_atlas(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyActivations>()?;
    m.add_class::<PyAtlas>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(class_rank, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(capture_activations, m)?)?;
    m.add_function(wrap_pyfunction!(build_atlas, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_ranks, m)?)?;
    m.add_function(wrap_pyfunction!(run_all_cells, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline_config, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
