//! Python bindings. Images cross the boundary as flat `float` lists plus a
//! shape; results come back as lists and dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::dfkd::harness::{self, DatasetHandle, DatasetId, DatasetSpec};
use ::dfkd::losses::{self, KdConfig};
use ::dfkd::selfsup::{self, AugmentedLabel, RotationId};
use ::dfkd::{autograd::Graph, DfkdError, Tensor};

fn err(e: DfkdError) -> PyErr {
    match e {
        DfkdError::Io(_) | DfkdError::DatasetMissing(_) | DfkdError::NonFinite { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor<f64>> {
    Tensor::new(shape, data).map_err(err)
}

/// Run configuration. Construct from TOML or use the defaults.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: harness::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(s) => harness::RunConfig::from_toml_str(s).map_err(err)?,
            None => harness::RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: harness::RunConfig::load(&path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.name().to_string()
    }

    #[setter]
    fn set_variant(&mut self, v: &str) -> PyResult<()> {
        self.inner.variant = v.parse().map_err(err)?;
        Ok(())
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.rounds
    }

    #[setter]
    fn set_rounds(&mut self, v: usize) {
        self.inner.rounds = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.weights.alpha
    }

    #[setter]
    fn set_alpha(&mut self, v: f64) {
        self.inner.weights.alpha = v;
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, v: PathBuf) {
        self.inner.output_dir = v;
    }

    #[getter]
    fn teacher_checkpoint(&self) -> PathBuf {
        self.inner.teacher_checkpoint.clone()
    }

    #[setter]
    fn set_teacher_checkpoint(&mut self, v: PathBuf) {
        self.inner.teacher_checkpoint = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(variant={}, rounds={}, seed={}, alpha={})",
            self.inner.variant, self.inner.rounds, self.inner.seed, self.inner.weights.alpha
        )
    }
}

/// A saved image bank, read-only.
#[pyclass(name = "ImageBank")]
struct PyImageBank {
    inner: ::dfkd::bank::ImageBank,
}

#[pymethods]
impl PyImageBank {
    #[staticmethod]
    fn open(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ::dfkd::bank::ImageBank::open(&dir).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn geometry(&self) -> Option<(usize, usize, usize)> {
        self.inner.geometry()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn rounds(&self) -> Vec<u32> {
        self.inner.rounds().to_vec()
    }

    fn record(&self, i: usize) -> PyResult<Vec<f32>> {
        self.inner
            .record(i)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| PyValueError::new_err(format!("record {i} out of range")))
    }

    #[pyo3(signature = (classes = 10))]
    fn histogram(&self, classes: usize) -> Vec<usize> {
        self.inner.histogram(classes)
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }
}

/// `k = n * M + m`.
#[pyfunction]
#[pyo3(signature = (n, m, classes = 10, rotations = 4))]
fn encode_label(n: usize, m: usize, classes: usize, rotations: usize) -> PyResult<usize> {
    Ok(AugmentedLabel::encode(n, m, classes, rotations)
        .map_err(err)?
        .k)
}

/// `(n, m)` for augmented label `k`.
#[pyfunction]
#[pyo3(signature = (k, classes = 10, rotations = 4))]
fn decode_label(k: usize, classes: usize, rotations: usize) -> PyResult<(usize, usize)> {
    let l = AugmentedLabel::decode(k, classes, rotations).map_err(err)?;
    Ok((l.n, l.m))
}

/// Rotates a `(B, C, H, W)` batch clockwise by rotation index `m` of `rotations`.
#[pyfunction]
#[pyo3(signature = (data, shape, m, rotations = 4))]
fn rotate(data: Vec<f64>, shape: Vec<usize>, m: usize, rotations: usize) -> PyResult<Vec<f64>> {
    let t = tensor(shape, data)?;
    let r = RotationId::new(m, rotations).map_err(err)?;
    Ok(selfsup::rotate(&t, r).map_err(err)?.into_data())
}

fn logits(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    let b = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("ragged logits"));
    }
    tensor(vec![b, n], rows.into_iter().flatten().collect())
}

/// Batch-mean cross-entropy of `logits` (list of rows) against `labels`.
#[pyfunction]
fn cross_entropy(logits_rows: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    losses::cross_entropy_value(&logits(logits_rows)?, &labels).map_err(err)
}

/// Distillation KL at temperature `tau`.
#[pyfunction]
#[pyo3(signature = (teacher, student, tau = 1.0, scale_by_tau_sq = false))]
fn kd_loss(
    teacher: Vec<Vec<f64>>,
    student: Vec<Vec<f64>>,
    tau: f64,
    scale_by_tau_sq: bool,
) -> PyResult<f64> {
    let mut g = Graph::<f64>::new();
    let t = g.constant(logits(teacher)?);
    let s = g.constant(logits(student)?);
    let kd = KdConfig {
        temperature: tau,
        scale_by_tau_sq,
    };
    let v = losses::loss_kd(&mut g, t, s, &kd).map_err(err)?;
    Ok(g.scalar(v))
}

fn load(
    cfg: &harness::RunConfig,
    data_root: PathBuf,
    with_train: bool,
) -> PyResult<DatasetHandle<f32>> {
    let arch = cfg.effective_architecture();
    let spec = DatasetSpec {
        id: DatasetId::parse(&cfg.dataset).map_err(err)?,
        root: data_root,
        channels: arch.channels,
        height: arch.height,
        width: arch.width,
        max_train: cfg.pretrain.max_train,
        max_test: cfg.max_test,
    };
    DatasetHandle::load(&spec, with_train).map_err(err)
}

/// Trains the teacher and writes it to `out`. Returns its test accuracy.
#[pyfunction]
fn pretrain(
    py: Python<'_>,
    config: PyRunConfig,
    data_root: PathBuf,
    out: PathBuf,
) -> PyResult<f64> {
    let cfg = config.inner;
    py.detach(move || {
        let data = load(&cfg, data_root, true)?;
        let (_, s) =
            harness::pretrain_teacher(&data, &cfg.effective_architecture(), &cfg.pretrain, &out)
                .map_err(err)?;
        Ok(s.test_accuracy)
    })
}

/// Runs (or resumes) a distillation run. Returns a summary dict.
#[pyfunction]
fn distill<'py>(
    py: Python<'py>,
    config: PyRunConfig,
    data_root: PathBuf,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner;
    let s = py.detach(move || -> PyResult<_> {
        let data = load(&cfg, data_root, false)?;
        harness::run_dfkd(&cfg, &data.test_view()).map_err(err)
    })?;
    let d = PyDict::new(py);
    d.set_item("output_dir", s.output_dir)?;
    d.set_item("teacher_accuracy", s.teacher_accuracy)?;
    d.set_item("final_student_accuracy", s.final_student_accuracy)?;
    d.set_item("bank_size", s.bank_size)?;
    d.set_item("rounds", s.metrics.len())?;
    Ok(d)
}

/// Rows of a `metrics.csv` as dicts.
#[pyfunction]
fn read_metrics<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    harness::read_metrics(&path)
        .map_err(err)?
        .into_iter()
        .map(|m| {
            let d = PyDict::new(py);
            d.set_item("round", m.round)?;
            d.set_item("l_ce", m.l_ce)?;
            d.set_item("l_kd", m.l_kd)?;
            d.set_item("l_fea", m.l_fea)?;
            d.set_item("l_csd", m.l_csd)?;
            d.set_item("student_acc", m.student_acc)?;
            d.set_item("aux_acc", m.aux_acc)?;
            Ok(d)
        })
        .collect()
}

/// Regenerates figures under `root`; returns the written paths.
#[pyfunction]
#[pyo3(signature = (root, grids = true))]
fn plot(root: PathBuf, grids: bool) -> PyResult<Vec<PathBuf>> {
    harness::plot_from_artifacts(&root, grids).map_err(err)
}

#[pyfunction]
fn variants() -> Vec<&'static str> {
    ::dfkd::synthesis::Variant::ALL
        .iter()
        .map(|v| v.name())
        .collect()
}

#[pyfunction]
fn architectures() -> Vec<&'static str> {
    ::dfkd::models::registered_architectures()
}

#[pymodule]
#[pyo3(name = "dfkd")]
fn dfkd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyImageBank>()?;
    m.add_function(wrap_pyfunction!(encode_label, m)?)?;
    m.add_function(wrap_pyfunction!(decode_label, m)?)?;
    m.add_function(wrap_pyfunction!(rotate, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(read_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(plot, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(architectures, m)?)?;
    Ok(())
}
