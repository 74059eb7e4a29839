//! Python bindings: the descriptor and token utilities on plain lists, plus
//! a `SpliceNet` handle for running trained checkpoints on image files.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use splice_core::cli::{LoadedSpliceNet, VitSpec};
use splice_core::clsops;
use splice_core::distillation::{self, DescriptorIndex, Metric};
use splice_core::features::{self, ClsToken};
use splice_core::image::ImageTensor;
use splice_core::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(msg),
        Error::Lookup(_) => PyKeyError::new_err(msg),
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::Tensor(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn token(values: &[f32]) -> PyResult<ClsToken> {
    ClsToken::from_vec(values, 0, &Device::Cpu, DType::F32).map_err(py_err)
}

/// Cosine self-similarity of the rows of `keys` (an N x D list of lists).
#[pyfunction]
fn self_similarity(keys: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let n = keys.len();
    let d = keys.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(PyValueError::new_err("keys must be a non-empty N x D matrix"));
    }
    if keys.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("keys rows differ in length"));
    }
    let flat: Vec<f64> = keys.into_iter().flatten().collect();
    let t = Tensor::from_vec(flat, (n, d), &Device::Cpu).map_err(|e| py_err(e.into()))?;
    let s = features::self_similarity(&t).map_err(py_err)?;
    s.matrix.to_dtype(DType::F64).and_then(|m| m.to_vec2()).map_err(|e| py_err(e.into()))
}

/// `alpha * target + (1 - alpha) * structure` for each alpha.
#[pyfunction]
fn interpolate_cls(structure: Vec<f32>, target: Vec<f32>, alphas: Vec<f64>) -> PyResult<Vec<Vec<f32>>> {
    clsops::interpolate_cls(&token(&structure)?, &token(&target)?, &alphas)
        .and_then(|ts| ts.iter().map(ClsToken::to_vec).collect())
        .map_err(py_err)
}

#[pyclass(name = "Modes", get_all, frozen)]
struct PyModes {
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    inertia: f64,
    inertia_trace: Vec<f64>,
    iterations: usize,
}

/// Seeded k-means over appearance tokens.
#[pyfunction]
#[pyo3(signature = (tokens, k, seed = 0, max_iterations = 300))]
fn kmeans_modes(tokens: Vec<Vec<f64>>, k: usize, seed: u64, max_iterations: usize) -> PyResult<PyModes> {
    let m = clsops::kmeans_modes(&tokens, k, seed, max_iterations).map_err(py_err)?;
    Ok(PyModes {
        centroids: m.centroids,
        assignments: m.assignments,
        inertia: m.inertia,
        inertia_trace: m.inertia_trace,
        iterations: m.iterations,
    })
}

/// Unordered mutual K-nearest-neighbor pairs over precomputed descriptors.
#[pyfunction]
#[pyo3(signature = (ids, descriptors, k, metric = "cosine"))]
fn mutual_knn_pairs(ids: Vec<String>, descriptors: Vec<Vec<f32>>, k: usize, metric: &str) -> PyResult<Vec<(String, String)>> {
    let metric: Metric = metric.parse().map_err(py_err)?;
    let index = DescriptorIndex::new(ids, descriptors, metric, 1).map_err(py_err)?;
    Ok(distillation::mutual_knn_pairs(&index, k).map_err(py_err)?.unordered)
}

/// Coarse self-similarity descriptors for every image in `data_dir`.
/// Returns `(ids, descriptors)`; unreadable files are skipped.
#[pyfunction]
#[pyo3(signature = (data_dir, window = 2, resize = 224, vit_arch = "vit-b8", vit_weights = "random:0"))]
fn describe_directory(
    py: Python<'_>,
    data_dir: PathBuf,
    window: usize,
    resize: usize,
    vit_arch: &str,
    vit_weights: &str,
) -> PyResult<(Vec<String>, Vec<Vec<f32>>)> {
    let spec = VitSpec {
        arch: vit_arch.into(),
        weights: vit_weights.into(),
    };
    py.detach(|| {
        let vit = spec.load(&Device::Cpu)?;
        distillation::compute_descriptors_from_dir(&data_dir, &vit, window, resize, Metric::Cosine)
    })
    .map(|index| (index.image_ids, index.descriptors))
    .map_err(py_err)
}

/// A trained SpliceNet checkpoint together with its ViT.
#[pyclass(name = "SpliceNet", frozen)]
struct PySpliceNet {
    inner: LoadedSpliceNet,
}

impl PySpliceNet {
    fn image(&self, path: &PathBuf) -> PyResult<ImageTensor> {
        ImageTensor::load(path, &Device::Cpu, DType::F32).map_err(py_err)
    }
}

#[pymethods]
impl PySpliceNet {
    #[new]
    #[pyo3(signature = (checkpoint, vit_weights = None))]
    fn new(checkpoint: PathBuf, vit_weights: Option<String>) -> PyResult<Self> {
        let inner = LoadedSpliceNet::load(&checkpoint, vit_weights.as_deref(), &Device::Cpu).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn token_dim(&self) -> usize {
        self.inner.model.config().token_dim
    }

    /// Appearance token of the image at `path`.
    fn cls(&self, py: Python<'_>, path: PathBuf) -> PyResult<Vec<f32>> {
        let img = self.image(&path)?;
        py.detach(|| self.inner.cls(&img).and_then(|t| t.to_vec())).map_err(py_err)
    }

    /// Renders `structure` with the appearance of `appearance` (an image path)
    /// or of an explicit `token`, writes a PNG to `out` and returns `(height, width)`.
    #[pyo3(signature = (structure, out, appearance = None, token = None))]
    fn run(
        &self,
        py: Python<'_>,
        structure: PathBuf,
        out: PathBuf,
        appearance: Option<PathBuf>,
        token: Option<Vec<f32>>,
    ) -> PyResult<(usize, usize)> {
        let s = self.image(&structure)?;
        let source = match (appearance, token) {
            (Some(_), Some(_)) => return Err(PyValueError::new_err("pass either appearance or token, not both")),
            (None, None) => return Err(PyValueError::new_err("pass an appearance image or a token")),
            (Some(p), None) => Err(self.image(&p)?),
            (None, Some(v)) => Ok(self::token(&v)?),
        };
        py.detach(|| {
            // Ok holds a ready token, Err an appearance image still to encode
            let tok = match source {
                Ok(t) => t,
                Err(img) => self.inner.cls(&img)?,
            };
            let img = self.inner.forward(&s, &tok)?;
            img.save_png(&out)?;
            Ok((img.height(), img.width()))
        })
        .map_err(py_err)
    }
}

#[pymodule]
fn splice_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(self_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate_cls, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_modes, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_knn_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(describe_directory, m)?)?;
    m.add_class::<PyModes>()?;
    m.add_class::<PySpliceNet>()?;
    Ok(())
}
