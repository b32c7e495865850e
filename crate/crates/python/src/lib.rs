//! Python module `psclab`.

use std::path::PathBuf;

use psclab_core::checkpoint;
use psclab_core::data::ByteTokenizer;
use psclab_core::eval::{self, PasskeyTask};
use psclab_core::numerics::Tensor;
use psclab_core::phase::{self, PhaseShiftSpec};
use psclab_core::psc::{self, PscHeadWeights};
use psclab_core::rope;
use psclab_core::train::{self, DiagnosticConfig};
use psclab_core::{FrequencySchedule, Layout, ModelState, RunConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(psclab, PsclabError, PyException);

fn err(e: psclab_core::Error) -> PyErr {
    PsclabError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PsclabError::new_err(e.to_string())
}

fn layout(name: &str) -> PyResult<Layout> {
    match name {
        "half_blocks" => Ok(Layout::HalfBlocks),
        "pair_interleaved" => Ok(Layout::PairInterleaved),
        other => Err(PsclabError::new_err(format!("unknown layout {other:?}"))),
    }
}

fn square(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Per-pair frequencies of a schedule given as JSON, e.g.
/// `{"kind": "pi", "base": 10000, "head_dim": 8, "context": 128, "extended_context": 256}`.
#[pyfunction]
fn frequencies(schedule_json: &str) -> PyResult<Vec<f64>> {
    let schedule: FrequencySchedule = serde_json::from_str(schedule_json).map_err(json_err)?;
    Ok(rope::frequencies(&schedule).map_err(err)?.into_data())
}

/// The `d × d` rotation for angles `m·θ`.
#[pyfunction]
#[pyo3(signature = (thetas, m, layout_name = "half_blocks"))]
fn rotary_matrix(thetas: Vec<f64>, m: f64, layout_name: &str) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&rope::rotary_matrix(&thetas, m, layout(layout_name)?)))
}

/// Numerical rank of the shift correction `R̃ − I`.
#[pyfunction]
#[pyo3(signature = (theta_star, theta_hat, position, layout_name = "half_blocks", rel_tol = 1e-8))]
fn shift_rank(
    theta_star: Vec<f64>,
    theta_hat: Vec<f64>,
    position: usize,
    layout_name: &str,
    rel_tol: f64,
) -> PyResult<usize> {
    let spec = PhaseShiftSpec::new(
        Tensor::vector(theta_star).map_err(err)?,
        Tensor::vector(theta_hat).map_err(err)?,
        position,
        layout(layout_name)?,
    )
    .map_err(err)?;
    phase::shift_rank(&spec, rel_tol).map_err(err)
}

/// `P(x) = ½·tanh(W2·silu(W1·x))` for one head.
#[pyfunction]
fn gate(w1: Vec<Vec<f64>>, w2: Vec<Vec<f64>>, x: Vec<f64>) -> PyResult<Vec<f64>> {
    let w = PscHeadWeights { w1: square(w1)?, w2: square(w2)? };
    if w.w1.shape() != [x.len(), x.len()] || w.w2.shape() != [x.len(), x.len()] {
        return Err(PsclabError::new_err("gate weights must be square with the input's dimension"));
    }
    Ok(psc::gate_vec(&w, &x).gate)
}

/// Extra parameters added by calibrating every layer.
#[pyfunction]
fn psc_param_count(layers: u64, n_heads: u64, n_kv_heads: u64, head_dim: u64) -> u64 {
    psc::param_count(layers, n_heads, n_kv_heads, head_dim)
}

#[pyfunction]
fn encode(text: &str) -> Vec<u32> {
    ByteTokenizer.encode(text.as_bytes())
}

#[pyfunction]
fn decode(tokens: Vec<u32>) -> PyResult<Vec<u8>> {
    ByteTokenizer.decode(&tokens).map_err(err)
}

/// Passkey prompt bytes with `m` fillers before the key and `n` after.
#[pyfunction]
fn passkey_prompt(m: usize, n: usize, key: u32) -> PyResult<Vec<u8>> {
    eval::make_passkey_prompt(&PasskeyTask { m, n, key }).map_err(err)
}

/// `(seed, baseline_mse, mse_lora_only, mse_lora_psc)` per seed.
#[pyfunction]
#[pyo3(signature = (seeds, config_json = None))]
fn rank_deficiency_diagnostic(
    py: Python<'_>,
    seeds: Vec<u64>,
    config_json: Option<&str>,
) -> PyResult<Vec<(u64, f64, f64, f64)>> {
    let cfg: DiagnosticConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => DiagnosticConfig::default(),
    };
    let rows = py.detach(|| train::diagnostic_sweep(&cfg, &seeds)).map_err(err)?;
    Ok(rows.into_iter().map(|r| (r.seed, r.baseline_mse, r.mse_lora_only, r.mse_lora_psc)).collect())
}

/// The toy decoder with optional calibration and adapters.
#[pyclass(name = "Model", module = "psclab")]
struct PyModel {
    inner: ModelState,
}

#[pymethods]
impl PyModel {
    /// Builds a model from a run configuration given as JSON (defaults when omitted).
    #[new]
    #[pyo3(signature = (config_json = None, seed = 0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = match config_json {
            Some(text) => RunConfig::from_json(text).map_err(err)?,
            None => RunConfig::default(),
        };
        let inner = ModelState::init(cfg.model_config().map_err(err)?, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load_model(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_model(&path, &self.inner, &[], None).map_err(err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }

    #[getter]
    fn max_context(&self) -> usize {
        self.inner.config.max_context
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(json_err)
    }

    /// Logits, one row per input token.
    fn forward(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.forward(&tokens).map_err(err)?))
    }

    /// Mean next-token cross-entropy.
    fn loss(&self, tokens: Vec<u32>) -> PyResult<f64> {
        self.inner.loss(&tokens).map_err(err)
    }

    #[pyo3(signature = (trainable_only = false))]
    fn parameter_count(&self, trainable_only: bool) -> usize {
        self.inner.parameter_count(trainable_only)
    }

    fn trainable_names(&self) -> Vec<String> {
        self.inner.trainable_names()
    }

    /// Strided perplexity of one token sequence.
    fn sliding_window_ppl(&self, py: Python<'_>, tokens: Vec<u32>, window: usize, stride: usize) -> PyResult<f64> {
        py.detach(|| eval::sliding_window_ppl(&self.inner, &tokens, window, stride)).map_err(err)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(layers={}, d_model={}, heads={}/{}, vocab={}, psc={:?}, lora_rank={})",
            c.layers,
            c.d_model,
            c.n_heads,
            c.n_kv_heads,
            c.vocab_size,
            c.psc,
            c.lora.as_ref().map_or(0, |l| l.rank)
        )
    }
}

#[pymodule]
pub fn psclab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PsclabError", m.py().get_type::<PsclabError>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(frequencies, m)?)?;
    m.add_function(wrap_pyfunction!(rotary_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(shift_rank, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(psc_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(passkey_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(rank_deficiency_diagnostic, m)?)?;
    Ok(())
}
