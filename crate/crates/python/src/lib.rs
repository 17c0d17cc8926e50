//! Python bindings for the masked-diffusion lab.
//!
//! Token sequences cross the boundary as `list[int]`, logits as
//! `list[list[float]]`. Library errors become `ValueError` (bad arguments),
//! `OSError` (filesystem) or `RuntimeError` (everything else), with the
//! error category as a message prefix.

use std::path::PathBuf;

use maskdiff::decode::{self, DecodeConfig, Strategy};
use maskdiff::diffusion::{self, MaskLevel, MaskedState, TokenSeq};
use maskdiff::harness::{self, Experiment};
use maskdiff::losses;
use maskdiff::model::{self, LogitMatrix, MaskPredictor, ModelConfig, ModelParams};
use maskdiff::tasks::{self, TaskSpec, Vocab};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: maskdiff::Error) -> PyErr {
    let msg = format!("{}: {e}", e.category());
    match e {
        maskdiff::Error::Config { .. }
        | maskdiff::Error::Input { .. }
        | maskdiff::Error::Domain(_)
        | maskdiff::Error::Encoding(_)
        | maskdiff::Error::Parse(_) => PyValueError::new_err(msg),
        maskdiff::Error::Io(_) => PyOSError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

trait OrPyErr<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for maskdiff::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn logits_from_rows(rows: Vec<Vec<f64>>) -> PyResult<LogitMatrix<f64>> {
    let vocab = rows.first().map_or(0, Vec::len);
    if vocab == 0 || rows.iter().any(|r| r.len() != vocab) {
        return Err(PyValueError::new_err("logits must be a non-empty rectangular list of rows"));
    }
    let n = rows.len();
    Ok(LogitMatrix::new(n, vocab, rows.into_iter().flatten().collect()))
}

fn rows<F: Copy>(m: &LogitMatrix<F>) -> Vec<Vec<F>> {
    m.data.chunks(m.vocab).map(<[F]>::to_vec).collect()
}

/// A mask predictor: teacher or student parameters.
#[pyclass(name = "Model", module = "maskdiff_py")]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (vocab_size, max_len, num_layers, num_heads, hidden_dim, ffn_dim, adapter_rank=0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        max_len: usize,
        num_layers: usize,
        num_heads: usize,
        hidden_dim: usize,
        ffn_dim: usize,
        adapter_rank: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            vocab_size,
            max_len,
            num_layers,
            num_heads,
            hidden_dim,
            ffn_dim,
            adapter_rank,
            seed,
        };
        Ok(PyModel {
            inner: model::init_model(&config).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: model::load_checkpoint(&path, None).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, &path).py()
    }

    /// Model configuration as a JSON string.
    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn has_adapters(&self) -> bool {
        self.inner.has_adapters()
    }

    /// Copy with fresh zero-initialized adapters; computes the same function.
    fn with_adapters(&self, rank: usize, seed: u64) -> PyResult<Self> {
        let mut inner = self.inner.to_student();
        inner.attach_adapters(rank, seed).py()?;
        Ok(PyModel { inner })
    }

    /// Logits `[len][vocab]` for one (partially masked) sequence.
    fn forward(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f32>>> {
        Ok(rows(&self.inner.predict(&tokens).py()?))
    }

    /// Decodes a response. Returns a dict with `tokens`, `response`,
    /// `steps_used`, `tokens_per_step` and, when `trace` is set,
    /// `confidence`, `entropy` and `commit_step`.
    #[pyo3(signature = (prompt, total_len, block_len, strategy="entropy_threshold", threshold=0.5, steps=None, temperature=0.0, seed=0, eos_fill=true, trace=false))]
    #[allow(clippy::too_many_arguments)]
    fn decode<'py>(
        &self,
        py: Python<'py>,
        prompt: Vec<u32>,
        total_len: usize,
        block_len: usize,
        strategy: &str,
        threshold: f64,
        steps: Option<usize>,
        temperature: f64,
        seed: u64,
        eos_fill: bool,
        trace: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let strategy: Strategy = strategy.parse().py()?;
        let cfg = DecodeConfig {
            steps: steps.unwrap_or(total_len),
            threshold,
            temperature,
            seed,
            eos_fill,
            trace,
            ..DecodeConfig::new(strategy, total_len, block_len)
        };
        let r = decode::decode(&self.inner, &prompt, &cfg).py()?;
        let out = PyDict::new(py);
        out.set_item("tokens", r.output.tokens.clone())?;
        out.set_item("response", r.output.response().to_vec())?;
        out.set_item("steps_used", r.steps_used)?;
        out.set_item("tokens_per_step", r.tokens_per_step)?;
        if let Some(t) = r.trace {
            out.set_item("confidence", t.confidence)?;
            out.set_item("entropy", t.entropy)?;
            out.set_item("commit_step", t.commit_step)?;
        }
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(vocab_size={}, max_len={}, layers={}, hidden={}, adapter_rank={})",
            c.vocab_size, c.max_len, c.num_layers, c.hidden_dim, c.adapter_rank
        )
    }
}

#[pyfunction]
fn vocab_size() -> usize {
    Vocab::standard().len()
}

#[pyfunction]
fn encode_text(text: &str) -> PyResult<Vec<u32>> {
    Vocab::standard().encode(text).py()
}

#[pyfunction]
fn decode_text(ids: Vec<u32>) -> String {
    Vocab::standard().decode(&ids)
}

/// `(prompt, gold)` pairs.
#[pyfunction]
fn gen_addition(num_digits: u32, count: usize, seed: u64) -> PyResult<Vec<(String, String)>> {
    Ok(tasks::gen_addition(num_digits, count, seed).py()?.into_iter().map(|t| (t.prompt, t.gold)).collect())
}

#[pyfunction]
fn gen_sort(list_len: usize, max_val: u32, count: usize, seed: u64) -> PyResult<Vec<(String, String)>> {
    Ok(tasks::gen_sort(list_len, max_val, count, seed).py()?.into_iter().map(|t| (t.prompt, t.gold)).collect())
}

/// PAD-padded prompt ids for an addition prompt with `num_digits` operands.
#[pyfunction]
fn encode_addition_prompt(prompt: &str, num_digits: u32) -> PyResult<Vec<u32>> {
    TaskSpec::Addition { num_digits }.encode_prompt(prompt, &Vocab::standard()).py()
}

#[pyfunction]
fn check_answer(task: &str, prompt: &str, tokens: Vec<u32>, prompt_len: usize) -> PyResult<bool> {
    Ok(tasks::check_answer(task, prompt, &TokenSeq::new(tokens, prompt_len).py()?))
}

fn state_tuple(s: MaskedState) -> (Vec<u32>, Vec<usize>, Vec<usize>) {
    let active = s.active_mask().to_vec();
    (s.tokens, s.masked_positions, active)
}

/// Uniform masking at level `t`: `(tokens, masked_positions, [])`.
#[pyfunction]
fn forward_mask(tokens: Vec<u32>, prompt_len: usize, t: f64, seed: u64) -> PyResult<(Vec<u32>, Vec<usize>, Vec<usize>)> {
    let y = TokenSeq::new(tokens, prompt_len).py()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(state_tuple(diffusion::forward_mask(&y, MaskLevel::new(t).py()?, &mut rng)))
}

/// Semi-autoregressive masking of block `n`: `(tokens, masked_positions, active_mask)`.
#[pyfunction]
#[pyo3(signature = (tokens, prompt_len, n, q, block_len, seed, complement=false))]
fn semi_ar_mask(
    tokens: Vec<u32>,
    prompt_len: usize,
    n: usize,
    q: f64,
    block_len: usize,
    seed: u64,
    complement: bool,
) -> PyResult<(Vec<u32>, Vec<usize>, Vec<usize>)> {
    let y = TokenSeq::new(tokens, prompt_len).py()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = diffusion::semi_ar_mask(&y, n, q, block_len, &mut rng).py()?;
    let state = if complement { diffusion::complementary_mask(&state, &y).py()? } else { state };
    Ok(state_tuple(state))
}

/// Masked-token NLL over `masked` positions at level `t`: `(loss, grad)`.
#[pyfunction]
fn pretrain_loss(
    logits: Vec<Vec<f64>>,
    tokens: Vec<u32>,
    prompt_len: usize,
    masked: Vec<usize>,
    t: f64,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let logits = logits_from_rows(logits)?;
    let y = TokenSeq::new(tokens.clone(), prompt_len).py()?;
    let mut noisy = tokens;
    for &i in &masked {
        if i < prompt_len || i >= noisy.len() {
            return Err(PyValueError::new_err(format!("masked position {i} outside the response")));
        }
        noisy[i] = tasks::MASK_ID;
    }
    let state = MaskedState {
        tokens: noisy,
        prompt_len,
        masked_positions: masked,
        block: None,
    };
    let s = losses::pretrain_loss(&logits, &y, &state, MaskLevel::new(t).py()?).py()?;
    Ok((s.value, rows(&s.grad)))
}

#[pyfunction]
fn consistency_loss(logits: Vec<Vec<f64>>, tokens: Vec<u32>, prompt_len: usize, active: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let y = TokenSeq::new(tokens, prompt_len).py()?;
    let s = losses::consistency_loss(&logits_from_rows(logits)?, &y, &active).py()?;
    Ok((s.value, rows(&s.grad)))
}

#[pyfunction]
fn correct_set(logits: Vec<Vec<f64>>, tokens: Vec<u32>, prompt_len: usize, active: Vec<usize>) -> PyResult<Vec<usize>> {
    let y = TokenSeq::new(tokens, prompt_len).py()?;
    Ok(losses::correct_set(&logits_from_rows(logits)?, &y, &active))
}

#[pyfunction]
fn certainty_loss(logits: Vec<Vec<f64>>, correct: Vec<usize>, temperature: f64) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let s = losses::certainty_loss(&logits_from_rows(logits)?, &correct, temperature).py()?;
    Ok((s.value, rows(&s.grad)))
}

/// Combined objective: `(dict of loss terms, grad)`.
#[pyfunction]
#[pyo3(signature = (logits, tokens, prompt_len, active, temperature=0.5, beta=2.0))]
fn cfd_loss<'py>(
    py: Python<'py>,
    logits: Vec<Vec<f64>>,
    tokens: Vec<u32>,
    prompt_len: usize,
    active: Vec<usize>,
    temperature: f64,
    beta: f64,
) -> PyResult<(Bound<'py, PyDict>, Vec<Vec<f64>>)> {
    let y = TokenSeq::new(tokens, prompt_len).py()?;
    let (b, grad) = losses::cfd_loss(&logits_from_rows(logits)?, &y, &active, temperature, beta).py()?;
    let terms = PyDict::new(py);
    terms.set_item("consistency", b.consistency)?;
    terms.set_item("certainty", b.certainty)?;
    terms.set_item("combined", b.combined)?;
    terms.set_item("correct_count", b.correct_count)?;
    terms.set_item("active_count", b.active_count)?;
    Ok((terms, rows(&grad)))
}

/// Runs one pipeline stage (`pretrain`, `traject`, `distill`, `eval`,
/// `profile` or `decode`) from a TOML config into `out`.
#[pyfunction]
#[pyo3(signature = (stage, config, out, seed=None))]
fn run_stage(stage: &str, config: PathBuf, out: PathBuf, seed: Option<u64>) -> PyResult<()> {
    let exp = Experiment::from_file(&config, &out, seed).py()?;
    match stage {
        "pretrain" => harness::run_pretrain(&exp).py().map(drop),
        "traject" => harness::run_traject(&exp).py().map(drop),
        "distill" => harness::run_distill(&exp).py().map(drop),
        "eval" => harness::run_eval(&exp).py().map(drop),
        "profile" => harness::run_profile(&exp).py().map(drop),
        "decode" => harness::run_decode(&exp).py().map(drop),
        other => Err(PyValueError::new_err(format!("unknown stage {other:?}"))),
    }
}

#[pymodule]
fn maskdiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MASK_ID", tasks::MASK_ID)?;
    m.add("EOS_ID", tasks::EOS_ID)?;
    m.add("PAD_ID", tasks::PAD_ID)?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(vocab_size, m)?)?;
    m.add_function(wrap_pyfunction!(encode_text, m)?)?;
    m.add_function(wrap_pyfunction!(decode_text, m)?)?;
    m.add_function(wrap_pyfunction!(gen_addition, m)?)?;
    m.add_function(wrap_pyfunction!(gen_sort, m)?)?;
    m.add_function(wrap_pyfunction!(encode_addition_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(check_answer, m)?)?;
    m.add_function(wrap_pyfunction!(forward_mask, m)?)?;
    m.add_function(wrap_pyfunction!(semi_ar_mask, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_loss, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_loss, m)?)?;
    m.add_function(wrap_pyfunction!(correct_set, m)?)?;
    m.add_function(wrap_pyfunction!(certainty_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cfd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    Ok(())
}
