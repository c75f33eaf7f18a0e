//! Python bindings: tensors, the Haar transform, HFQE, gradient checks,
//! toy training and the scaling study.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hfwave::bench::{self, ReferenceAttention, ScalingConfig};
use hfwave::harness::{self, GradTarget, TrainConfig};
use hfwave::hfqe::{self, QuantizationConfig, DEFAULT_K_RATIO, DEFAULT_Q};
use hfwave::numerics::io;
use hfwave::{wavelet, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::DetachedGraph => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

/// A dense row-major `f64` tensor.
#[pyclass(name = "Tensor", module = "hfwave", frozen, skip_from_py_object)]
#[derive(Clone, Debug)]
pub struct PyTensor {
    pub inner: Tensor,
}

impl From<Tensor> for PyTensor {
    fn from(inner: Tensor) -> Self {
        PyTensor { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Tensor::new(shape, data).map_err(py_err)?.into())
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Tensor::zeros(&shape).into()
    }

    /// Reads a PGM (P5) image or a tensor file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(io::read_any(path).map_err(py_err)?.cast().into())
    }

    /// Writes a 32-bit tensor file.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_tensor(path, &self.inner.cast()).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn sum_sq(&self) -> f64 {
        self.inner.sum_sq()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.dims())
    }
}

/// Single-level transform of an `(h, w, c)` tensor into `(LL, LH, HL, HH)`.
#[pyfunction]
pub fn haar_forward(x: &PyTensor) -> PyResult<(PyTensor, PyTensor, PyTensor, PyTensor)> {
    let s = wavelet::forward(&x.inner).map_err(py_err)?;
    Ok((s.ll.into(), s.lh.into(), s.hl.into(), s.hh.into()))
}

#[pyfunction]
pub fn haar_inverse(
    ll: &PyTensor,
    lh: &PyTensor,
    hl: &PyTensor,
    hh: &PyTensor,
) -> PyResult<PyTensor> {
    let s = wavelet::SubbandSet::new(
        ll.inner.clone(),
        lh.inner.clone(),
        hl.inner.clone(),
        hh.inner.clone(),
    )
    .map_err(py_err)?;
    Ok(wavelet::inverse(&s).map_err(py_err)?.into())
}

/// Quantizes the LL subband to multiples of `q` and reconstructs.
#[pyfunction]
#[pyo3(signature = (x, q = DEFAULT_Q))]
pub fn hfqe_enhance(x: &PyTensor, q: f64) -> PyResult<PyTensor> {
    let cfg = QuantizationConfig::new(q).map_err(py_err)?;
    Ok(hfqe::hfqe_enhance(&x.inner, cfg).map_err(py_err)?.into())
}

/// LH, HL and HH concatenated along channels.
#[pyfunction]
pub fn concat_hf(x: &PyTensor) -> PyResult<PyTensor> {
    Ok(hfqe::concat_hf(&x.inner).map_err(py_err)?.into())
}

/// Row indices of the largest-norm tokens of an `(n, d)` tensor, by rank.
#[pyfunction]
#[pyo3(signature = (tokens, k = DEFAULT_K_RATIO))]
pub fn top_k(tokens: &PyTensor, k: f64) -> PyResult<Vec<usize>> {
    Ok(hfqe::top_k_select(&tokens.inner, k)
        .map_err(py_err)?
        .indices)
}

/// Maximum relative gradient error for one of mixing, encoder, lp, oim, detection.
#[pyfunction]
#[pyo3(signature = (target, seed = 0))]
pub fn gradcheck(target: &str, seed: u64) -> PyResult<f64> {
    let target: GradTarget = target.parse().map_err(py_err)?;
    harness::gradcheck_target(target, seed).map_err(py_err)
}

/// Multi-head attention with seeded random projections over an `(n, d)` tensor.
#[pyfunction]
#[pyo3(signature = (x, heads = bench::DEFAULT_HEADS, seed = 0))]
pub fn reference_attention(x: &PyTensor, heads: usize, seed: u64) -> PyResult<PyTensor> {
    let (_, d) = x.inner.matrix().map_err(py_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn = ReferenceAttention::new(d, heads, &mut rng).map_err(py_err)?;
    Ok(attn.forward(&x.inner).map_err(py_err)?.into())
}

/// Training configuration. Keyword arguments use the config-file keys.
#[pyclass(name = "TrainConfig", module = "hfwave", skip_from_py_object)]
#[derive(Clone, Debug, Default)]
pub struct PyTrainConfig {
    pub inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = PyTrainConfig::default();
        if let Some(kwargs) = kwargs {
            for (k, v) in kwargs.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                cfg.set(&key, &value)?;
            }
        }
        Ok(cfg)
    }

    /// Sets one key; Python booleans are accepted for `hfqe`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let value = match value {
            "True" => "true",
            "False" => "false",
            v => v,
        };
        self.inner.set(key, value).map_err(py_err)
    }

    /// The same run with the proxy loss and enhancement switched off.
    fn ablated(&self) -> Self {
        PyTrainConfig {
            inner: self.inner.ablated(),
        }
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "TrainConfig(steps={}, seed={}, k={}, lambda={}, q={}, lambda_p={}, hfqe={})",
            c.steps, c.seed, c.k_ratio, c.proxy_momentum, c.q, c.lambda_p, c.hfqe
        )
    }
}

/// Trains into `out_dir` and returns held-out retrieval metrics plus output paths.
#[pyfunction]
pub fn train(py: Python<'_>, config: &PyTrainConfig, out_dir: PathBuf) -> PyResult<Py<PyDict>> {
    let cfg = config.inner.clone();
    cfg.validate().map_err(py_err)?;
    let (trainer, out) = harness::train(&cfg, &out_dir).map_err(py_err)?;
    let m = harness::evaluate_retrieval(&trainer.model, &trainer.data.gallery, &trainer.data.query)
        .map_err(py_err)?;
    std::fs::write(out_dir.join("metrics.txt"), m.report()).map_err(|e| py_err(e.into()))?;
    let d = PyDict::new(py);
    d.set_item("top1", m.top1)?;
    d.set_item("mAP", m.map)?;
    d.set_item("losses", out.losses)?;
    d.set_item("checkpoint", out.checkpoint)?;
    d.set_item("steps", trainer.steps_done())?;
    Ok(d.unbind())
}

/// `(top1, mAP)` for a checkpoint directory written by `train`.
#[pyfunction]
pub fn evaluate(checkpoint: PathBuf) -> PyResult<(f64, f64)> {
    let m = harness::evaluate_checkpoint(checkpoint).map_err(py_err)?;
    Ok((m.top1, m.map))
}

/// Times mixing and attention on a token ladder. Returns the report rows as
/// `(layer_kind, token_count, median_ns, mad_ns, repetitions)` and the
/// fitted log-log slope per layer.
#[pyfunction]
#[pyo3(signature = (sizes = bench::DEFAULT_SIZES.to_vec(), channels = bench::DEFAULT_CHANNELS, reps = bench::MIN_REPETITIONS, seed = 0))]
#[allow(clippy::type_complexity)]
pub fn scaling_study(
    sizes: Vec<usize>,
    channels: usize,
    reps: usize,
    seed: u64,
) -> PyResult<(Vec<(String, usize, f64, f64, usize)>, HashMap<String, f64>)> {
    let cfg = ScalingConfig {
        sizes,
        channels,
        reps,
        seed,
        ..ScalingConfig::default()
    };
    let report = bench::run_scaling_study(&cfg).map_err(py_err)?;
    let rows = report
        .rows
        .iter()
        .map(|r| {
            (
                r.layer_kind.to_string(),
                r.token_count,
                r.median_ns,
                r.mad_ns,
                r.repetitions,
            )
        })
        .collect();
    let slopes = bench::LayerKind::ALL
        .iter()
        .filter_map(|&k| report.slope(k).map(|s| (k.to_string(), s)))
        .collect();
    Ok((rows, slopes))
}

#[pymodule]
#[pyo3(name = "hfwave")]
pub fn hfwave_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DEFAULT_Q", DEFAULT_Q)?;
    m.add("DEFAULT_K_RATIO", DEFAULT_K_RATIO)?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_function(wrap_pyfunction!(haar_forward, m)?)?;
    m.add_function(wrap_pyfunction!(haar_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(hfqe_enhance, m)?)?;
    m.add_function(wrap_pyfunction!(concat_hf, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(reference_attention, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_study, m)?)?;
    Ok(())
}
