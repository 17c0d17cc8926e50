//! Certainty-forcing self-distillation.
//!
//! A frozen teacher decodes its own training targets one token per pass;
//! incorrect trajectories are dropped. The student, a copy of the teacher
//! with low-rank adapters, is then trained on semi-autoregressive masked
//! states of those trajectories with a consistency term and an entropy term
//! on already-correct positions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

use crate::decode::{decode, teacher_trajectory, DecodeConfig, Strategy};
use crate::diffusion::{complementary_mask, sample_block_index, semi_ar_mask, MaskedState, TokenSeq};
use crate::error::{Error, Result};
use crate::harness::MetricsRow;
use crate::losses::{cfd_terms, LossBreakdown, DEFAULT_BETA, DEFAULT_CERTAINTY_TEMPERATURE};
use crate::model::{Adam, AdamConfig, LogitMatrix, MaskPredictor, ModelParams};
use crate::tasks::MASK_ID;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub prompt_ids: Vec<u32>,
    /// EOS-padded teacher response.
    pub response_ids: Vec<u32>,
    pub block_len: usize,
    pub correct: bool,
    /// Path or label of the teacher that produced the response.
    pub teacher_checkpoint: String,
}

impl TrajectoryRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(pos) = self.response_ids.iter().position(|&t| t == MASK_ID) {
            return Err(Error::Dataset(format!("response holds MASK at position {pos}")));
        }
        if self.block_len == 0 || self.response_ids.is_empty() || self.response_ids.len() % self.block_len != 0 {
            return Err(Error::Dataset(format!(
                "response length {} is not a positive multiple of block length {}",
                self.response_ids.len(),
                self.block_len
            )));
        }
        Ok(())
    }

    pub fn sequence(&self) -> Result<TokenSeq> {
        let mut tokens = self.prompt_ids.clone();
        tokens.extend_from_slice(&self.response_ids);
        TokenSeq::new(tokens, self.prompt_ids.len())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    version: u32,
}

pub fn write_dataset(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        format: "trajectories".into(),
        version: DATASET_FORMAT_VERSION,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header: DatasetHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?).map_err(|e| Error::Parse(format!("dataset header: {e}")))?,
        None => return Err(Error::Parse("empty dataset file".into())),
    };
    if header.format != "trajectories" || header.version != DATASET_FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported dataset {} v{}",
            header.format, header.version
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("dataset line {}: {e}", i + 2)))?;
        r.validate()?;
        records.push(r);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetentionStats {
    pub generated: usize,
    pub retained: usize,
    pub retention: f64,
}

/// Decodes one trajectory per prompt with the teacher and keeps those the
/// checker accepts. `checker` receives the prompt index and decoded sequence.
pub fn build_dataset<M, C>(
    teacher: &M,
    prompts: &[Vec<u32>],
    total_len: usize,
    block_len: usize,
    checker: C,
    teacher_checkpoint: &str,
) -> Result<(Vec<TrajectoryRecord>, RetentionStats)>
where
    M: MaskPredictor + ?Sized,
    C: Fn(usize, &TokenSeq) -> bool + Sync,
{
    let all: Vec<TrajectoryRecord> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (mut record, result) = teacher_trajectory(teacher, p, total_len, block_len)?;
            record.correct = checker(i, &result.output);
            record.teacher_checkpoint = teacher_checkpoint.to_string();
            Ok(record)
        })
        .collect::<Result<_>>()?;
    let generated = all.len();
    let kept: Vec<TrajectoryRecord> = all.into_iter().filter(|r| r.correct).collect();
    if kept.is_empty() {
        return Err(Error::Dataset(format!(
            "none of {generated} teacher trajectories passed the answer checker"
        )));
    }
    let stats = RetentionStats {
        generated,
        retained: kept.len(),
        retention: kept.len() as f64 / generated as f64,
    };
    Ok((kept, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    SemiAr,
    /// The whole response forms a single active block.
    WholeSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    ConsistencyOnly,
    CertaintyOnly,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::ConsistencyOnly => "consistency_only",
            Ablation::CertaintyOnly => "certainty_only",
        }
    }

    /// Weights on (consistency, certainty).
    pub fn weights(self, beta: f64) -> (f64, f64) {
        match self {
            Ablation::Full => (1.0, beta),
            Ablation::ConsistencyOnly => (1.0, 0.0),
            Ablation::CertaintyOnly => (0.0, beta),
        }
    }
}

/// Active-block masking probability: fixed, or drawn from (0, 1] per batch.
/// Written as a number or the string `"random"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskRatio {
    Fixed(f64),
    Random,
}

impl MaskRatio {
    pub fn label(self) -> String {
        match self {
            MaskRatio::Fixed(q) => format!("{q}"),
            MaskRatio::Random => "random".into(),
        }
    }

    fn draw<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            MaskRatio::Fixed(q) => q,
            MaskRatio::Random => 1.0 - rng.random::<f64>(),
        }
    }
}

impl Serialize for MaskRatio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MaskRatio::Fixed(q) => s.serialize_f64(*q),
            MaskRatio::Random => s.serialize_str("random"),
        }
    }
}

impl<'de> Deserialize<'de> for MaskRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(q) => Ok(MaskRatio::Fixed(q)),
            Raw::Text(s) if s == "random" => Ok(MaskRatio::Random),
            Raw::Text(s) => Err(de::Error::custom(format!("mask ratio {s:?} is neither a number nor \"random\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub beta: f64,
    pub temperature: f64,
    pub mask_ratio: MaskRatio,
    pub masking_mode: MaskingMode,
    pub complementary: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// 0 fine-tunes every weight.
    pub adapter_rank: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            beta: DEFAULT_BETA,
            temperature: DEFAULT_CERTAINTY_TEMPERATURE,
            mask_ratio: MaskRatio::Fixed(0.5),
            masking_mode: MaskingMode::SemiAr,
            complementary: true,
            epochs: 1,
            batch_size: 16,
            learning_rate: 1e-3,
            adapter_rank: 16,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if let MaskRatio::Fixed(q) = self.mask_ratio {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::config("mask_ratio", format!("{q} outside (0, 1]")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive and finite"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn iterations(&self, dataset_len: usize) -> usize {
        self.epochs * dataset_len.div_ceil(self.batch_size)
    }
}

/// A masked training state together with its clean trajectory.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub target: TokenSeq,
    pub state: MaskedState,
}

fn sample_state<R: Rng>(y: &TokenSeq, block_len: usize, q: f64, mode: MaskingMode, rng: &mut R) -> Result<MaskedState> {
    let (n, len) = match mode {
        MaskingMode::SemiAr => (sample_block_index(y.response_len() / block_len, rng)?, block_len),
        MaskingMode::WholeSequence => (0, y.response_len()),
    };
    loop {
        let state = semi_ar_mask(y, n, q, len, rng)?;
        if !state.active_mask().is_empty() {
            return Ok(state);
        }
    }
}

/// Draws `count` states (plus complements when enabled) from `dataset`.
pub fn sample_states<R: Rng>(
    targets: &[(TokenSeq, usize)],
    count: usize,
    q: f64,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<Vec<TrainingState>> {
    let mut out = Vec::with_capacity(count * 2);
    for _ in 0..count {
        let (y, block_len) = &targets[rng.random_range(0..targets.len())];
        let state = sample_state(y, *block_len, q, cfg.masking_mode, rng)?;
        let complement = if cfg.complementary {
            Some(complementary_mask(&state, y)?).filter(|c| !c.active_mask().is_empty())
        } else {
            None
        };
        out.push(TrainingState {
            target: y.clone(),
            state,
        });
        if let Some(c) = complement {
            out.push(TrainingState {
                target: y.clone(),
                state: c,
            });
        }
    }
    Ok(out)
}

fn targets(dataset: &[TrajectoryRecord]) -> Result<Vec<(TokenSeq, usize)>> {
    dataset
        .iter()
        .map(|r| {
            r.validate()?;
            Ok((r.sequence()?, r.block_len))
        })
        .collect()
}

/// A fixed batch of states for before/after loss comparisons.
pub fn probe_states(dataset: &[TrajectoryRecord], count: usize, cfg: &DistillConfig, seed: u64) -> Result<Vec<TrainingState>> {
    if dataset.is_empty() {
        return Err(Error::Usage("probe batch from an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = cfg.mask_ratio.draw(&mut rng);
    sample_states(&targets(dataset)?, count, q, cfg, &mut rng)
}

fn batch_tokens(states: &[TrainingState]) -> Result<(Vec<u32>, usize)> {
    let seq_len = states[0].state.tokens.len();
    if states.iter().any(|s| s.state.tokens.len() != seq_len) {
        return Err(Error::Usage("training states differ in length".into()));
    }
    Ok((states.iter().flat_map(|s| s.state.tokens.iter().copied()).collect(), seq_len))
}

fn sub_logits(all: &LogitMatrix<f32>, index: usize, seq_len: usize) -> LogitMatrix<f32> {
    let width = seq_len * all.vocab;
    LogitMatrix::new(seq_len, all.vocab, all.data[index * width..(index + 1) * width].to_vec())
}

/// Mean loss terms over `states` plus the batch logit gradient.
fn batch_loss(
    logits: &LogitMatrix<f32>,
    states: &[TrainingState],
    seq_len: usize,
    cfg: &DistillConfig,
) -> Result<(LossBreakdown, LogitMatrix<f32>)> {
    let (wc, wh) = cfg.ablation.weights(cfg.beta);
    let scale = 1.0 / states.len() as f32;
    let mut grad = LogitMatrix::zeros(logits.rows, logits.vocab);
    let mut mean = LossBreakdown {
        consistency: 0.0,
        certainty: 0.0,
        combined: 0.0,
        correct_count: 0,
        active_count: 0,
        beta: cfg.beta,
    };
    let width = seq_len * logits.vocab;
    for (b, s) in states.iter().enumerate() {
        let sub = sub_logits(logits, b, seq_len);
        let terms = cfd_terms(&sub, &s.target, s.state.active_mask(), cfg.temperature as f32, cfg.beta)?;
        let g = &mut grad.data[b * width..(b + 1) * width];
        if wc != 0.0 {
            let w = wc as f32 * scale;
            g.iter_mut().zip(&terms.consistency_grad.data).for_each(|(g, c)| *g += w * c);
        }
        if wh != 0.0 {
            let w = wh as f32 * scale;
            g.iter_mut().zip(&terms.certainty_grad.data).for_each(|(g, h)| *g += w * h);
        }
        let n = states.len() as f64;
        let bd = terms.breakdown;
        mean.consistency += bd.consistency / n;
        mean.certainty += bd.certainty / n;
        mean.combined += (wc * bd.consistency + wh * bd.certainty) / n;
        mean.correct_count += bd.correct_count;
        mean.active_count += bd.active_count;
    }
    Ok((mean, grad))
}

/// Mean loss terms of `model` over fixed states, without training.
pub fn probe_loss(model: &ModelParams, states: &[TrainingState], cfg: &DistillConfig) -> Result<LossBreakdown> {
    if states.is_empty() {
        return Err(Error::Usage("empty probe batch".into()));
    }
    let (tokens, seq_len) = batch_tokens(states)?;
    let logits = model.forward_batch(&tokens, states.len())?;
    Ok(batch_loss(&logits, states, seq_len, cfg)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub iterations: usize,
    /// Per-iteration mean loss terms over the batch.
    pub curve: Vec<LossBreakdown>,
}

/// Trains `student` on the trajectory dataset. Adapters of
/// `cfg.adapter_rank` are attached first unless the student already has some
/// or the rank is 0.
pub fn train_cfd(student: ModelParams, dataset: &[TrajectoryRecord], cfg: &DistillConfig) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("distillation needs a non-empty dataset".into()));
    }
    let targets = targets(dataset)?;
    let mut student = student;
    if cfg.adapter_rank > 0 && !student.has_adapters() {
        student.attach_adapters(cfg.adapter_rank, cfg.seed ^ 0x5eed_ada9)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::default());
    let iterations = cfg.iterations(dataset.len());
    let mut curve = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let q = cfg.mask_ratio.draw(&mut rng);
        let states = sample_states(&targets, cfg.batch_size, q, cfg, &mut rng)?;
        let (tokens, seq_len) = batch_tokens(&states)?;
        let rec = student.forward_recorded(&tokens, states.len())?;
        let (loss, grad) = batch_loss(&rec.logits, &states, seq_len, cfg)?;
        if !loss.combined.is_finite() {
            return Err(Error::Divergence(format!("distillation loss {} at iteration {it}", loss.combined)));
        }
        student.backward_and_step(rec, &grad, &mut adam, cfg.learning_rate)?;
        curve.push(loss);
    }
    Ok((student, TrainReport { iterations, curve }))
}

/// Decoding statistics for one model under one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecodeSummary {
    pub accuracy: f64,
    pub steps_mean: f64,
    pub steps_std: f64,
    pub tokens_per_step: f64,
}

/// Decodes every prompt and scores it with `checker`.
pub fn summarize<M, C>(model: &M, prompts: &[Vec<u32>], cfg: &DecodeConfig, checker: &C) -> Result<DecodeSummary>
where
    M: MaskPredictor + ?Sized,
    C: Fn(usize, &TokenSeq) -> bool + Sync,
{
    if prompts.is_empty() {
        return Err(Error::Usage("no evaluation prompts".into()));
    }
    let per: Vec<(bool, usize, f64)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i as u64);
            let r = decode(model, p, &c)?;
            Ok((checker(i, &r.output), r.steps_used, r.tokens_per_step))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let correct = per.iter().filter(|p| p.0).count();
    let steps_mean = per.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let var = per.iter().map(|p| (p.1 as f64 - steps_mean).powi(2)).sum::<f64>() / n;
    Ok(DecodeSummary {
        accuracy: correct as f64 / n,
        steps_mean,
        steps_std: var.sqrt(),
        tokens_per_step: per.iter().map(|p| p.2).sum::<f64>() / n,
    })
}

/// Teacher and student rows for every decode configuration, with speedups
/// against the teacher's one-per-step decode at the same lengths.
pub fn evaluate_pair<C>(
    teacher: &ModelParams,
    student: &ModelParams,
    prompts: &[Vec<u32>],
    grid: &[DecodeConfig],
    checker: &C,
    run_id: &str,
) -> Result<Vec<MetricsRow>>
where
    C: Fn(usize, &TokenSeq) -> bool + Sync,
{
    if teacher.config.vocab_size != student.config.vocab_size || teacher.config.max_len != student.config.max_len {
        return Err(Error::Usage("teacher and student configurations differ".into()));
    }
    let mut baselines: Vec<((usize, usize, bool), f64)> = Vec::new();
    let mut rows = Vec::with_capacity(grid.len() * 2);
    for cfg in grid {
        let key = (cfg.total_len, cfg.block_len, cfg.eos_fill);
        let baseline = match baselines.iter().find(|(k, _)| *k == key) {
            Some((_, b)) => *b,
            None => {
                let base_cfg = DecodeConfig {
                    strategy: Strategy::OnePerStep,
                    temperature: 0.0,
                    trace: false,
                    ..cfg.clone()
                };
                let b = summarize(teacher, prompts, &base_cfg, checker)?.steps_mean;
                baselines.push((key, b));
                b
            }
        };
        for (role, model) in [("teacher", teacher), ("student", student)] {
            let s = summarize(model, prompts, cfg, checker)?;
            rows.push(MetricsRow::new(run_id, role, cfg, s, baseline));
        }
    }
    Ok(rows)
}
