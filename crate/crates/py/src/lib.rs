//! Python bindings: patterns, attention kernels, mask targets, the
//! enhancement model, the warm-up schedule and the MAC calculator.
//!
//! Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyComplex, PyDict};

use ripple_core::analysis::{macs_attention, AttentionModel, MacScope};
use ripple_core::dsp::{mix_at_snr, stft, Complex64, StftConfig, Waveform, SAMPLE_RATE};
use ripple_core::kernel::MhaParams;
use ripple_core::model::{self, forward, ModelConfig, ModelParams};
use ripple_core::pattern;
use ripple_core::targets::{self, Objective};
use ripple_core::tensor::Matrix;
use ripple_core::{kernel, train, Error};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::Numerical(m) => PyArithmeticError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Matrix::from_rows(&rows).map_err(err)
}

fn complex(z: &Bound<'_, PyComplex>) -> Complex64 {
    Complex64::new(z.real(), z.imag())
}

#[pyclass(name = "PatternSpec", frozen, eq, hash, from_py_object)]
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct PyPatternSpec(pattern::PatternSpec);

#[pymethods]
impl PyPatternSpec {
    /// Parses `full`, `band:W`, `ripple:W:D` or `blockwise:B`.
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        text.parse().map(Self).map_err(err)
    }

    #[staticmethod]
    fn full() -> Self {
        Self(pattern::PatternSpec::Full)
    }

    #[staticmethod]
    fn band(w: usize) -> PyResult<Self> {
        pattern::PatternSpec::band(w).map(Self).map_err(err)
    }

    #[staticmethod]
    fn ripple(w: usize, d: usize) -> PyResult<Self> {
        pattern::PatternSpec::ripple(w, d).map(Self).map_err(err)
    }

    #[staticmethod]
    fn blockwise(block: usize) -> PyResult<Self> {
        pattern::PatternSpec::blockwise(block)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.kind_name()
    }

    fn admits(&self, i: usize, j: usize) -> bool {
        self.0.admits(i, j)
    }

    fn row_columns(&self, i: usize, length: usize) -> Vec<usize> {
        let mut cols = Vec::new();
        self.0.row_columns(i, length, &mut cols);
        cols
    }

    fn nnz(&self, length: usize) -> PyResult<u64> {
        pattern::nnz(&self.0, length).map_err(err)
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("PatternSpec('{}')", self.0)
    }
}

#[pyfunction]
fn nnz(spec: PyPatternSpec, length: usize) -> PyResult<u64> {
    pattern::nnz(&spec.0, length).map_err(err)
}

#[pyfunction]
fn build_mask(spec: PyPatternSpec, length: usize) -> PyResult<Vec<Vec<bool>>> {
    let m = pattern::build_mask(&spec.0, length).map_err(err)?;
    Ok((0..length).map(|i| m.row(i).to_vec()).collect())
}

#[pyfunction]
fn layer_schedule(blocks: usize, spec: PyPatternSpec) -> Vec<PyPatternSpec> {
    pattern::layer_schedule(blocks, &spec.0)
        .into_iter()
        .map(PyPatternSpec)
        .collect()
}

/// Multi-head attention weights (no biases), each `d_model × d_model`.
#[pyclass(name = "Attention", frozen)]
struct PyAttention(MhaParams);

#[pymethods]
impl PyAttention {
    #[new]
    #[pyo3(signature = (heads, d_model, seed=0))]
    fn new(heads: usize, d_model: usize, seed: u64) -> PyResult<Self> {
        MhaParams::seeded(heads, d_model, seed)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn from_weights(
        heads: usize,
        wq: Vec<Vec<f64>>,
        wk: Vec<Vec<f64>>,
        wv: Vec<Vec<f64>>,
        wo: Vec<Vec<f64>>,
    ) -> PyResult<Self> {
        MhaParams::new(heads, matrix(wq)?, matrix(wk)?, matrix(wv)?, matrix(wo)?)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn heads(&self) -> usize {
        self.0.heads()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.0.d_model()
    }

    /// Reference kernel: full score matrix with masked entries at -inf.
    fn dense(
        &self,
        q: Vec<Vec<f64>>,
        k: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        spec: PyPatternSpec,
    ) -> PyResult<Vec<Vec<f64>>> {
        let q = matrix(q)?;
        let mask = pattern::build_mask(&spec.0, q.rows()).map_err(err)?;
        kernel::attend_dense(&q, &matrix(k)?, &matrix(v)?, &self.0, &mask)
            .map(|m| m.to_rows())
            .map_err(err)
    }

    /// Sparse kernel: only the admitted pairs are scored.
    fn sparse(
        &self,
        q: Vec<Vec<f64>>,
        k: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        spec: PyPatternSpec,
    ) -> PyResult<Vec<Vec<f64>>> {
        kernel::attend_sparse(&matrix(q)?, &matrix(k)?, &matrix(v)?, &self.0, &spec.0)
            .map(|m| m.to_rows())
            .map_err(err)
    }
}

#[pyfunction]
fn irm_value(s: &Bound<'_, PyComplex>, d: &Bound<'_, PyComplex>) -> f64 {
    targets::irm_value(complex(s), complex(d))
}

#[pyfunction]
fn psm_value(s: &Bound<'_, PyComplex>, x: &Bound<'_, PyComplex>) -> f64 {
    targets::psm_value(complex(s), complex(x))
}

/// Mixes `clean` and `noise` (16 kHz samples) at `snr_db` and returns the
/// training target for `objective` (`"irm"` or `"psm"`) as frame rows.
#[pyfunction]
#[pyo3(signature = (clean, noise, snr_db, objective="irm", bins=257))]
fn mask_target(
    clean: Vec<f64>,
    noise: Vec<f64>,
    snr_db: f64,
    objective: &str,
    bins: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let objective: Objective = objective.parse().map_err(err)?;
    let cfg = StftConfig::for_bins(bins).map_err(err)?;
    let clean = Waveform::new(clean, SAMPLE_RATE).map_err(err)?;
    let noise = Waveform::new(noise, SAMPLE_RATE).map_err(err)?;
    let (noisy, noise) = mix_at_snr(&clean, &noise, snr_db).map_err(err)?;
    let spec = |w: &Waveform| stft(w, &cfg).map_err(err);
    let m =
        targets::target(objective, &spec(&clean)?, &spec(&noise)?, &spec(&noisy)?).map_err(err)?;
    Ok(m.values().to_rows())
}

#[pyclass(name = "Model")]
struct PyModel(ModelParams);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (pattern="ripple:12:24", blocks=4, heads=8, d_model=256, d_ff=1024, bins=257, seed=0))]
    fn new(
        pattern: &str,
        blocks: usize,
        heads: usize,
        d_model: usize,
        d_ff: usize,
        bins: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            blocks,
            heads,
            d_model,
            d_ff,
            bins,
            pattern: pattern.parse().map_err(err)?,
        };
        ModelParams::init(config, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        model::load(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save(&self.0, path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.0.config;
        let d = PyDict::new(py);
        d.set_item("blocks", c.blocks)?;
        d.set_item("heads", c.heads)?;
        d.set_item("d_model", c.d_model)?;
        d.set_item("d_ff", c.d_ff)?;
        d.set_item("bins", c.bins)?;
        d.set_item("pattern", c.pattern.to_string())?;
        Ok(d)
    }

    /// Mask estimate in `[0, 1]` for an `L × bins` magnitude spectrogram.
    fn forward(&self, magnitude: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let cache = forward(&self.0, &matrix(magnitude)?).map_err(err)?;
        Ok(cache.output().to_rows())
    }
}

#[pyfunction]
fn lr_at(d_model: usize, warmup_steps: u64, step: u64) -> PyResult<f64> {
    train::lr_at(d_model, warmup_steps, step).map_err(err)
}

/// Theoretical MACs of a B-layer stack; `pattern` also accepts
/// `sepformer:C`.
#[pyfunction]
#[pyo3(signature = (pattern, length, blocks=4, d_model=256, d_ff=1024, scope="attention"))]
fn macs<'py>(
    py: Python<'py>,
    pattern: &str,
    length: usize,
    blocks: usize,
    d_model: usize,
    d_ff: usize,
    scope: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let model: AttentionModel = pattern.parse().map_err(err)?;
    let scope: MacScope = scope.parse().map_err(err)?;
    let cfg = ModelConfig {
        blocks,
        heads: 1,
        d_model,
        d_ff,
        bins: 1,
        pattern: pattern::PatternSpec::Full,
    };
    let r = macs_attention(&model, length, &cfg, scope).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("pattern", r.pattern)?;
    d.set_item("L", r.len)?;
    d.set_item("macs_scores", r.macs_scores)?;
    d.set_item("macs_context", r.macs_context)?;
    d.set_item("macs_proj", r.macs_proj)?;
    d.set_item("macs_ffn", r.macs_ffn)?;
    d.set_item("macs_total", r.macs_total)?;
    Ok(d)
}

#[pymodule]
fn ripple_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPatternSpec>()?;
    m.add_class::<PyAttention>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(nnz, m)?)?;
    m.add_function(wrap_pyfunction!(build_mask, m)?)?;
    m.add_function(wrap_pyfunction!(layer_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(irm_value, m)?)?;
    m.add_function(wrap_pyfunction!(psm_value, m)?)?;
    m.add_function(wrap_pyfunction!(mask_target, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(macs, m)?)?;
    Ok(())
}
