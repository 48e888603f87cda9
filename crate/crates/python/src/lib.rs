//! Python module `svt`: tensors, configs, datasets, checkpoints, the
//! distillation loss, both training stages and the evaluation helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use svt_core::autodiff::{self, Tape};
use svt_core::checkpoint::Checkpoint;
use svt_core::config::RunConfig;
use svt_core::data::{self, Dataset, SyntheticConfig};
use svt_core::distill::{self, DistillEpochMetrics};
use svt_core::eval;
use svt_core::finetune::Classifier;
use svt_core::vit::ViTConfig;
use svt_core::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::Csv(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for svt_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Dense f32 tensor (row-major).
#[pyclass(name = "Tensor", module = "svt", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    pub inner: Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: Tensor::new(shape, data).py()?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor {
            inner: Tensor::zeros(shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }

    fn __eq__(&self, other: &PyTensor) -> bool {
        self.inner == other.inner
    }

    /// Row-wise softmax of `x / temperature` over the last axis.
    #[pyo3(signature = (temperature = 1.0))]
    fn softmax(&self, temperature: f32) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: autodiff::softmax(&self.inner, temperature).py()?,
        })
    }

    #[pyo3(signature = (temperature = 1.0))]
    fn log_softmax(&self, temperature: f32) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: autodiff::log_softmax(&self.inner, temperature).py()?,
        })
    }
}

fn wrap(t: Tensor<f32>) -> PyTensor {
    PyTensor { inner: t }
}

/// Encoder hyper-parameters; keyword arguments override the defaults.
#[pyclass(name = "ViTConfig", module = "svt", skip_from_py_object)]
#[derive(Clone)]
pub struct PyViTConfig {
    pub inner: ViTConfig,
}

#[pymethods]
impl PyViTConfig {
    #[new]
    #[pyo3(signature = (image_size = 32, patch_size = 4, depth = 9, dim = 192, heads = 12, mlp_ratio = 2.0))]
    fn new(image_size: usize, patch_size: usize, depth: usize, dim: usize, heads: usize, mlp_ratio: f64) -> PyResult<Self> {
        let inner = ViTConfig {
            image_size: [image_size, image_size],
            patch_size,
            depth,
            dim,
            heads,
            mlp_ratio,
            ..ViTConfig::default()
        };
        inner.validate().py()?;
        Ok(PyViTConfig { inner })
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.inner.num_patches()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    fn __repr__(&self) -> String {
        format!("ViTConfig({})", self.to_json())
    }
}

/// Complete run configuration (JSON).
#[pyclass(name = "RunConfig", module = "svt", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    pub inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = RunConfig::from_json(text).py()?;
        inner.validate().py()?;
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let inner = RunConfig::from_file(&path).py()?;
        inner.validate().py()?;
        Ok(PyRunConfig { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn vit(&self) -> PyViTConfig {
        PyViTConfig {
            inner: self.inner.vit.clone(),
        }
    }

    fn dataset(&self) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: self.inner.dataset.load().py()?,
        })
    }
}

#[pyclass(name = "Dataset", module = "svt", skip_from_py_object)]
pub struct PyDataset {
    pub inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (seed = 0, classes = 4, train_per_class = 64, test_per_class = 16, size = 32, noise = 0.05, quadrant = false))]
    fn synthetic(
        seed: u64,
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        size: usize,
        noise: f64,
        quadrant: bool,
    ) -> PyResult<Self> {
        let cfg = SyntheticConfig {
            classes,
            train_per_class,
            test_per_class,
            size,
            noise,
            quadrant,
        };
        Ok(PyDataset {
            inner: data::synthetic_dataset(seed, &cfg).py()?,
        })
    }

    #[staticmethod]
    fn cifar10(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_cifar10(&path).py()?,
        })
    }

    #[staticmethod]
    fn cifar100(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_cifar100(&path).py()?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.spec.name.clone()
    }

    #[getter]
    fn train_count(&self) -> usize {
        self.inner.spec.train_count
    }

    #[getter]
    fn test_count(&self) -> usize {
        self.inner.spec.test_count
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.spec.classes
    }

    #[getter]
    fn mean(&self) -> [f32; 3] {
        self.inner.spec.mean
    }

    #[getter]
    fn std(&self) -> [f32; 3] {
        self.inner.spec.std
    }

    /// `(pixels [H, W, 3] in [0, 1], label)` of one sample.
    #[pyo3(signature = (index, split = "train"))]
    fn sample(&self, index: usize, split: &str) -> PyResult<(PyTensor, usize)> {
        let set = match split {
            "train" => &self.inner.train,
            "test" => &self.inner.test,
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        let s = set
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("{split} index {index} out of range")))?;
        let t = Tensor::new(vec![s.image.height, s.image.width, 3], s.image.data.clone()).py()?;
        Ok((wrap(t), s.label))
    }

    fn subset(&self, n_train: usize, n_test: usize) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: self.inner.subset(n_train, n_test).py()?,
        })
    }

    /// Writes one split in the raw `SVTR` format.
    #[pyo3(signature = (path, split = "test"))]
    fn write_raw(&self, path: PathBuf, split: &str) -> PyResult<()> {
        let set = if split == "train" { &self.inner.train } else { &self.inner.test };
        data::write_raw(&path, set).py()
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.spec;
        format!("Dataset({}: {} train, {} test, {} classes)", s.name, s.train_count, s.test_count, s.classes)
    }
}

/// Named-tensor checkpoint file.
#[pyclass(name = "Checkpoint", module = "svt", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCheckpoint {
    pub inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: Checkpoint::load(&path).py()?,
        })
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: Checkpoint::from_bytes(bytes).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_bytes().py()
    }

    #[getter]
    fn stage(&self) -> String {
        self.inner.stage.clone()
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.epoch
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn names(&self) -> Vec<String> {
        self.inner.entries.iter().map(|e| e.name.clone()).collect()
    }

    fn tensor(&self, name: &str) -> PyResult<PyTensor> {
        Ok(wrap(self.inner.tensor::<f32>(name).py()?))
    }
}

/// Fine-tuned encoder plus linear classifier.
#[pyclass(name = "Classifier", module = "svt", skip_from_py_object)]
pub struct PyClassifier {
    pub inner: Classifier,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn from_checkpoint(checkpoint: &PyCheckpoint, vit: &PyViTConfig) -> PyResult<Self> {
        Ok(PyClassifier {
            inner: Classifier::from_checkpoint(&checkpoint.inner, vit.inner.clone()).py()?,
        })
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    /// Top-1 accuracy on the test split (or the train split).
    #[pyo3(signature = (dataset, split = "test", batch_size = 256))]
    fn accuracy(&self, dataset: &PyDataset, split: &str, batch_size: usize) -> PyResult<f64> {
        let d = &dataset.inner;
        let set = if split == "train" { &d.train } else { &d.test };
        self.inner.accuracy(set, d.spec.mean, d.spec.std, batch_size).py()
    }

    /// CLS attention of the last block for one test image: a dict with the
    /// patch grid, per-head maps, the head mean and the raw CLS rows.
    fn attention_map<'py>(&self, py: Python<'py>, dataset: &PyDataset, index: usize) -> PyResult<Bound<'py, PyDict>> {
        let d = &dataset.inner;
        let s = d
            .test
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("test index {index} out of range")))?;
        let map = eval::attention_map(&self.inner.backbone(), &s.image, d.spec.mean, d.spec.std).py()?;
        let out = PyDict::new(py);
        out.set_item("grid", map.grid)?;
        out.set_item("heads", map.heads)?;
        out.set_item("mean", map.mean)?;
        out.set_item("raw", map.raw)?;
        Ok(out)
    }
}

/// `softmax((logits − center) / τ)` row-wise.
#[pyfunction]
fn teacher_distribution(logits: &PyTensor, center: &PyTensor, temperature: f32) -> PyResult<PyTensor> {
    Ok(wrap(distill::teacher_distribution(&logits.inner, &center.inner, temperature).py()?))
}

/// View-prediction loss value from teacher target distributions and raw
/// student logits (global views first, then local views).
#[pyfunction]
#[pyo3(signature = (teacher_targets, student_globals, student_locals, student_temperature = 0.1, symmetric = true))]
fn distill_loss(
    teacher_targets: Vec<PyRef<'_, PyTensor>>,
    student_globals: Vec<PyRef<'_, PyTensor>>,
    student_locals: Vec<PyRef<'_, PyTensor>>,
    student_temperature: f64,
    symmetric: bool,
) -> PyResult<f64> {
    let to64 = |t: &Tensor<f32>| Tensor::<f64>::from_f64(t.shape().to_vec(), &t.to_f64_vec()).py();
    let targets = teacher_targets.iter().map(|t| to64(&t.inner)).collect::<PyResult<Vec<_>>>()?;
    let mut tape = Tape::<f64>::new();
    let mut logs = |views: &[PyRef<'_, PyTensor>]| -> PyResult<Vec<_>> {
        views
            .iter()
            .map(|v| {
                let x = tape.leaf(to64(&v.inner)?, false);
                distill::student_log_distribution(&mut tape, x, student_temperature).py()
            })
            .collect()
    };
    let g = logs(&student_globals)?;
    let l = logs(&student_locals)?;
    let loss = distill::distill_loss(&mut tape, &targets, &g, &l, symmetric, l.len()).py()?;
    Ok(tape.value(loss).data()[0])
}

#[pyfunction]
fn top1(logits: &PyTensor, labels: Vec<usize>) -> PyResult<f64> {
    eval::top1(&logits.inner, &labels).py()
}

/// Unweighted mean of per-set error percentages.
#[pyfunction]
fn mce(errors: Vec<(String, f64)>) -> PyResult<f64> {
    eval::mce(&errors).py()
}

fn metrics_dicts<'py>(py: Python<'py>, metrics: &[DistillEpochMetrics]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    metrics
        .iter()
        .map(|m| {
            let d = PyDict::new(py);
            d.set_item("epoch", m.epoch)?;
            d.set_item("loss", m.loss)?;
            d.set_item("teacher_entropy", m.teacher_entropy)?;
            d.set_item("lr", m.lr)?;
            d.set_item("momentum", m.momentum)?;
            d.set_item("teacher_temp", m.teacher_temp)?;
            d.set_item("collapse_warning", m.collapse_warning)?;
            Ok(d)
        })
        .collect()
}

/// Self-supervised pre-training; returns `(per-epoch metrics, checkpoint)`.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn pretrain<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    out_dir: Option<PathBuf>,
) -> PyResult<(Vec<Bound<'py, PyDict>>, PyCheckpoint)> {
    let c = &config.inner;
    let ds = c.dataset.load().py()?;
    let r = distill::pretrain(&ds, &c.vit, &c.distill, &c.views, c.seed, out_dir.as_deref()).py()?;
    Ok((metrics_dicts(py, &r.metrics)?, PyCheckpoint { inner: r.checkpoint }))
}

/// Supervised fine-tuning; returns `(final top-1, best top-1, classifier)`.
#[pyfunction]
#[pyo3(signature = (config, checkpoint = None, out_dir = None))]
fn finetune(
    config: &PyRunConfig,
    checkpoint: Option<&PyCheckpoint>,
    out_dir: Option<PathBuf>,
) -> PyResult<(f64, f64, PyClassifier)> {
    let c = &config.inner;
    let ds = c.dataset.load().py()?;
    let r = svt_core::finetune::finetune(&ds, checkpoint.map(|k| &k.inner), &c.vit, &c.finetune, c.seed, out_dir.as_deref()).py()?;
    Ok((r.final_top1, r.best_top1, PyClassifier { inner: r.model }))
}

/// Runs the `svt` command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    svt_core::cli::run(std::iter::once("svt".to_string()).chain(args))
}

#[pymodule]
fn svt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyViTConfig>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(teacher_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(distill_loss, m)?)?;
    m.add_function(wrap_pyfunction!(top1, m)?)?;
    m.add_function(wrap_pyfunction!(mce, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
