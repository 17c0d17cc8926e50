//! Reverse-process samplers.
//!
//! Decoding starts from an all-MASK response and proceeds block by block,
//! left to right. Each pass runs the model once over the whole sequence and
//! commits a strategy-dependent subset of the current block's masked
//! positions. `steps_used` counts model forward passes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::TokenSeq;
use crate::distill::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::model::MaskPredictor;
use crate::num::{entropy_from_log_probs, log_softmax};
use crate::tasks::{EOS_ID, MASK_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Fixed per-block step budget.
    FixedSteps,
    /// Commit everything at or above a max-probability threshold.
    ConfThreshold,
    /// Commit everything at or below an entropy threshold (nats).
    EntropyThreshold,
    /// One highest-confidence position per pass.
    OnePerStep,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::FixedSteps => "fixed_steps",
            Strategy::ConfThreshold => "conf_threshold",
            Strategy::EntropyThreshold => "entropy_threshold",
            Strategy::OnePerStep => "one_per_step",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_steps" => Ok(Strategy::FixedSteps),
            "conf_threshold" => Ok(Strategy::ConfThreshold),
            "entropy_threshold" => Ok(Strategy::EntropyThreshold),
            "one_per_step" => Ok(Strategy::OnePerStep),
            other => Err(Error::config("strategy", format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Response length to generate.
    pub total_len: usize,
    pub block_len: usize,
    /// Total pass budget for `fixed_steps`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub threshold: f64,
    /// 0 means greedy argmax.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    /// Once a finished block contains EOS, fill every later block with EOS
    /// without further passes.
    #[serde(default = "default_true")]
    pub eos_fill: bool,
    #[serde(default)]
    pub trace: bool,
}

fn default_steps() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl DecodeConfig {
    pub fn new(strategy: Strategy, total_len: usize, block_len: usize) -> Self {
        DecodeConfig {
            strategy,
            total_len,
            block_len,
            steps: total_len,
            threshold: 0.0,
            temperature: 0.0,
            seed: 0,
            eos_fill: true,
            trace: false,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn num_blocks(&self) -> usize {
        self.total_len / self.block_len.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_len == 0 || self.total_len == 0 || self.total_len % self.block_len != 0 {
            return Err(Error::config(
                "block_len",
                format!("total_len {} is not a positive multiple of block_len {}", self.total_len, self.block_len),
            ));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.strategy == Strategy::FixedSteps && self.steps % self.num_blocks() != 0 {
            return Err(Error::config(
                "steps",
                format!("{} steps cannot be split evenly over {} blocks", self.steps, self.num_blocks()),
            ));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::config("threshold", "must be >= 0"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Per-pass certainty record over the response positions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertaintyTrace {
    /// `[steps_used][response_len]` max softmax probability; 1.0 once committed.
    pub confidence: Vec<Vec<f64>>,
    /// Same shape, predictive entropy in nats; 0.0 once committed.
    pub entropy: Vec<Vec<f64>>,
    /// Pass index at which each response position was committed.
    pub commit_step: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub output: TokenSeq,
    pub steps_used: usize,
    /// Tokens committed by model passes divided by passes. EOS filled without
    /// a pass is not counted.
    pub tokens_per_step: f64,
    pub trace: Option<CertaintyTrace>,
}

struct Prediction {
    token: u32,
    confidence: f64,
    entropy: f64,
}

fn predict_position(row: &[f32], temperature: f64, rng: &mut ChaCha8Rng, scratch: &mut [f32]) -> Prediction {
    log_softmax(row, 1.0, scratch);
    let entropy = entropy_from_log_probs(scratch) as f64;
    let mut best = None::<usize>;
    for (v, &lp) in scratch.iter().enumerate() {
        if v as u32 != MASK_ID && best.is_none_or(|b| lp > scratch[b]) {
            best = Some(v);
        }
    }
    let best = best.expect("vocabulary has non-mask tokens");
    let token = if temperature == 0.0 {
        best
    } else {
        let weights: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(v, &z)| if v as u32 == MASK_ID { f64::NEG_INFINITY } else { z as f64 / temperature })
            .collect();
        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = best;
        for (v, p) in probs.iter().enumerate() {
            if *p > 0.0 && u < *p {
                pick = v;
                break;
            }
            u -= p;
        }
        pick
    };
    Prediction {
        token: token as u32,
        confidence: (scratch[best] as f64).exp(),
        entropy,
    }
}

/// Decodes a response for `prompt` with the configured remasking strategy.
pub fn decode<M: MaskPredictor + ?Sized>(model: &M, prompt: &[u32], cfg: &DecodeConfig) -> Result<DecodeResult> {
    cfg.validate()?;
    let prompt_len = prompt.len();
    let seq_len = prompt_len + cfg.total_len;
    if seq_len > model.max_len() {
        return Err(Error::Input {
            position: model.max_len(),
            reason: format!("prompt of {prompt_len} plus {} response positions exceeds max_len", cfg.total_len),
        });
    }
    if let Some(pos) = prompt.iter().position(|&t| t == MASK_ID || t as usize >= model.vocab_size()) {
        return Err(Error::Input {
            position: pos,
            reason: "prompt contains MASK or an out-of-range id".into(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = prompt.to_vec();
    tokens.resize(seq_len, MASK_ID);
    let resp_len = cfg.total_len;
    let mut commit_step = vec![usize::MAX; resp_len];
    let mut trace = cfg.trace.then(|| CertaintyTrace {
        confidence: Vec::new(),
        entropy: Vec::new(),
        commit_step: Vec::new(),
    });
    let mut scratch = vec![0f32; model.vocab_size()];
    let mut steps = 0usize;
    let mut committed_by_model = 0usize;
    let per_block_budget = cfg.steps / cfg.num_blocks();

    'blocks: for block in 0..cfg.num_blocks() {
        let start = block * cfg.block_len;
        let end = start + cfg.block_len;
        let mut local_step = 0usize;
        while tokens[prompt_len + start..prompt_len + end].contains(&MASK_ID) {
            let logits = model.predict(&tokens)?;
            let mut preds: Vec<Option<Prediction>> = Vec::with_capacity(resp_len);
            for i in 0..resp_len {
                let abs = prompt_len + i;
                preds.push((tokens[abs] == MASK_ID).then(|| {
                    predict_position(logits.row(abs), cfg.temperature, &mut rng, &mut scratch)
                }));
            }
            if let Some(tr) = trace.as_mut() {
                tr.confidence
                    .push(preds.iter().map(|p| p.as_ref().map_or(1.0, |p| p.confidence)).collect());
                tr.entropy
                    .push(preds.iter().map(|p| p.as_ref().map_or(0.0, |p| p.entropy)).collect());
            }

            let mut candidates: Vec<(usize, &Prediction)> =
                (start..end).filter_map(|i| preds[i].as_ref().map(|p| (i, p))).collect();
            // best first; stable sort keeps ties in position order
            match cfg.strategy {
                Strategy::EntropyThreshold => {
                    candidates.sort_by(|a, b| a.1.entropy.total_cmp(&b.1.entropy))
                }
                _ => candidates.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence)),
            }
            let take = match cfg.strategy {
                Strategy::OnePerStep => 1,
                Strategy::FixedSteps => {
                    let remaining_budget = per_block_budget.saturating_sub(local_step).max(1);
                    candidates.len().div_ceil(remaining_budget)
                }
                Strategy::ConfThreshold => candidates
                    .iter()
                    .filter(|(_, p)| p.confidence >= cfg.threshold)
                    .count()
                    .max(1),
                Strategy::EntropyThreshold => candidates
                    .iter()
                    .filter(|(_, p)| p.entropy <= cfg.threshold)
                    .count()
                    .max(1),
            };
            for &(i, p) in candidates.iter().take(take) {
                tokens[prompt_len + i] = p.token;
                commit_step[i] = steps;
            }
            committed_by_model += take.min(candidates.len());
            steps += 1;
            local_step += 1;
        }

        if cfg.eos_fill && tokens[prompt_len..prompt_len + end].contains(&EOS_ID) && end < resp_len {
            let last = steps.saturating_sub(1);
            for i in end..resp_len {
                tokens[prompt_len + i] = EOS_ID;
                commit_step[i] = last;
            }
            break 'blocks;
        }
    }

    if let Some(tr) = trace.as_mut() {
        tr.commit_step = commit_step.clone();
    }
    Ok(DecodeResult {
        output: TokenSeq::new(tokens, prompt_len)?,
        steps_used: steps,
        tokens_per_step: committed_by_model as f64 / steps.max(1) as f64,
        trace,
    })
}

/// Decode with tracing switched on.
pub fn trace_certainty<M: MaskPredictor + ?Sized>(model: &M, prompt: &[u32], cfg: &DecodeConfig) -> Result<DecodeResult> {
    let mut cfg = cfg.clone();
    cfg.trace = true;
    decode(model, prompt, &cfg)
}

/// Greedy one-token-per-pass decode of the full response, as the teacher
/// generates its training trajectories. `correct` is left false for the
/// dataset builder to fill in.
pub fn teacher_trajectory<M: MaskPredictor + ?Sized>(
    model: &M,
    prompt: &[u32],
    total_len: usize,
    block_len: usize,
) -> Result<(TrajectoryRecord, DecodeResult)> {
    let mut cfg = DecodeConfig::new(Strategy::OnePerStep, total_len, block_len);
    cfg.eos_fill = false;
    let result = decode(model, prompt, &cfg)?;
    let record = TrajectoryRecord {
        prompt_ids: prompt.to_vec(),
        response_ids: result.output.response().to_vec(),
        block_len,
        correct: false,
        teacher_checkpoint: String::new(),
    };
    Ok((record, result))
}

pub const TRACE_CSV_HEADER: &str = "step,position,confidence,entropy,committed";

/// One row per (step, response position). `step_offset` shifts step numbers
/// when several traces share a file. `committed` is 1 when the position is
/// committed by the end of that step.
pub fn write_trace_rows<W: Write>(out: &mut W, trace: &CertaintyTrace, step_offset: usize) -> std::io::Result<()> {
    for (s, (conf, ent)) in trace.confidence.iter().zip(&trace.entropy).enumerate() {
        for (i, (c, h)) in conf.iter().zip(ent).enumerate() {
            let committed = u8::from(trace.commit_step[i] <= s);
            writeln!(out, "{},{},{:.6},{:.6},{}", s + step_offset, i, c, h, committed)?;
        }
    }
    Ok(())
}
