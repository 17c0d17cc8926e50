//! Experiment runner behind the CLI.
//!
//! One TOML file describes a whole run. Every stage reads and writes inside
//! a single output directory, so `pretrain`, `traject`, `distill`, `eval` and
//! `profile` can be invoked one after another on the same `--out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{decode, write_trace_rows, DecodeConfig, DecodeResult, Strategy, TRACE_CSV_HEADER};
use crate::diffusion::{forward_mask, MaskLevel, TokenSeq};
use crate::distill::{
    build_dataset, evaluate_pair, probe_loss, probe_states, read_dataset, summarize, train_cfd, write_dataset,
    Ablation, DecodeSummary, DistillConfig, MaskRatio, TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::losses::pretrain_loss;
use crate::model::{init_model, load_checkpoint, save_checkpoint, Adam, AdamConfig, LogitMatrix, ModelConfig, ModelParams};
use crate::tasks::{check_answer, ResponseFormat, read_task_file, remove_leakage, train_eval_split, write_task_file, TaskInstance, TaskSpec, Vocab};

pub const METRICS_CSV_HEADER: &str = "run_id,role,strategy,threshold,steps_mean,steps_std,tokens_per_step,accuracy,speedup";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub eval_size: usize,
    /// Prompts the teacher decodes to build the distillation dataset.
    pub distill_prompts: usize,
    /// Trajectories held out from training for before/after loss probes.
    #[serde(default = "default_probe_records")]
    pub probe_records: usize,
    pub response_len: usize,
    pub block_len: usize,
    /// Response layouts present in the pretraining corpus; each training
    /// draw picks one uniformly.
    #[serde(default = "default_formats")]
    pub response_formats: Vec<ResponseFormat>,
}

fn default_formats() -> Vec<ResponseFormat> {
    vec![ResponseFormat::LsbCarries]
}

fn default_probe_records() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup: usize,
    /// Cosine decay ends at `learning_rate * final_lr_ratio`.
    #[serde(default = "one")]
    pub final_lr_ratio: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn one() -> f64 {
    1.0
}

fn default_log_every() -> usize {
    100
}

impl PretrainConfig {
    pub fn learning_rate_at(&self, it: usize) -> f64 {
        if it < self.warmup {
            return self.learning_rate * (it + 1) as f64 / self.warmup as f64;
        }
        let span = self.iterations.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((it - self.warmup) as f64 / span).min(1.0);
        let floor = self.learning_rate * self.final_lr_ratio;
        floor + 0.5 * (self.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Students to train besides the default configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ablations: Vec<Ablation>,
    pub mask_ratios: Vec<MaskRatio>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ablations: vec![Ablation::Full, Ablation::ConsistencyOnly, Ablation::CertaintyOnly],
            mask_ratios: [0.25, 0.5, 0.75, 1.0]
                .into_iter()
                .map(MaskRatio::Fixed)
                .chain([MaskRatio::Random])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fixed_steps: Vec<usize>,
    pub conf_thresholds: Vec<f64>,
    pub entropy_thresholds: Vec<f64>,
    /// Entropy threshold used for the ablation and masking-ratio tables.
    pub headline_threshold: f64,
    pub eos_fill: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fixed_steps: Vec::new(),
            conf_thresholds: vec![0.9, 0.95],
            entropy_thresholds: (1..=10).map(|i| i as f64 / 10.0).collect(),
            headline_threshold: 0.5,
            eos_fill: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub probes: usize,
    /// One-based decoding step at which early-position confidence is compared.
    pub probe_step: usize,
    /// Number of leading response positions averaged at `probe_step`.
    pub early_positions: usize,
    pub conf_sweep: Vec<f64>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            probes: 100,
            probe_step: 8,
            early_positions: 32,
            conf_sweep: vec![0.3, 0.5, 0.7, 0.9, 0.95, 0.99],
        }
    }
}

/// Settings for the standalone `decode` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeStageConfig {
    /// `teacher` or the name of a trained student.
    pub model: String,
    pub strategy: Strategy,
    pub threshold: f64,
    pub steps: usize,
    pub temperature: f64,
    /// Explicit prompts; when empty the first `count` evaluation prompts are used.
    pub prompts: Vec<String>,
    pub count: usize,
}

impl Default for DecodeStageConfig {
    fn default() -> Self {
        DecodeStageConfig {
            model: "full".into(),
            strategy: Strategy::EntropyThreshold,
            threshold: 0.5,
            steps: 1,
            temperature: 0.0,
            prompts: Vec::new(),
            count: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskSpec,
    pub data: DataConfig,
    /// `seed` here is ignored; the model seed derives from the run seed.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub profile: ProfileConfig,
    #[serde(default)]
    pub decode: DecodeStageConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        let vocab = Vocab::standard();
        if self.model.vocab_size != vocab.len() {
            return Err(Error::config(
                "model.vocab_size",
                format!("{} does not match the task vocabulary of {}", self.model.vocab_size, vocab.len()),
            ));
        }
        let d = &self.data;
        if d.block_len == 0 || d.response_len == 0 || d.response_len % d.block_len != 0 {
            return Err(Error::config("data.block_len", "response_len must be a positive multiple of block_len"));
        }
        if d.response_len < self.task.max_response_len() {
            return Err(Error::config(
                "data.response_len",
                format!("{} cannot hold responses of {} characters", d.response_len, self.task.max_response_len()),
            ));
        }
        if self.task.prompt_width() + d.response_len > self.model.max_len {
            return Err(Error::config("model.max_len", "shorter than prompt width plus response length"));
        }
        if d.response_formats.is_empty() {
            return Err(Error::config("data.response_formats", "needs at least one format"));
        }
        if d.eval_size == 0 || d.train_size == 0 {
            return Err(Error::config("data.eval_size", "train and eval sets must be non-empty"));
        }
        let p = &self.pretrain;
        if p.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be at least 1"));
        }
        if !(p.learning_rate >= 0.0 && p.learning_rate.is_finite()) {
            return Err(Error::config("pretrain.learning_rate", "must be finite and >= 0"));
        }
        if p.log_every == 0 {
            return Err(Error::config("pretrain.log_every", "must be at least 1"));
        }
        if self.profile.probe_step == 0 {
            return Err(Error::config("profile.probe_step", "steps are counted from 1"));
        }
        for &t in self.eval.conf_thresholds.iter().chain(&self.eval.entropy_thresholds) {
            if t.is_nan() || t < 0.0 {
                return Err(Error::config("eval", format!("threshold {t} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn decode_config(&self, strategy: Strategy, threshold: f64) -> DecodeConfig {
        DecodeConfig {
            threshold,
            eos_fill: self.eval.eos_fill,
            ..DecodeConfig::new(strategy, self.data.response_len, self.data.block_len)
        }
    }

    /// Decode configurations evaluated for the main teacher/student table.
    pub fn decode_grid(&self) -> Vec<DecodeConfig> {
        let mut grid = vec![self.decode_config(Strategy::OnePerStep, 0.0)];
        for &steps in &self.eval.fixed_steps {
            grid.push(DecodeConfig {
                steps,
                ..self.decode_config(Strategy::FixedSteps, 0.0)
            });
        }
        for &t in &self.eval.conf_thresholds {
            grid.push(self.decode_config(Strategy::ConfThreshold, t));
        }
        for &t in &self.eval.entropy_thresholds {
            grid.push(self.decode_config(Strategy::EntropyThreshold, t));
        }
        grid
    }

    /// Distinct students to train, as `(name, config)`. The default
    /// configuration is named `full`.
    pub fn students(&self) -> Vec<(String, DistillConfig)> {
        let mut out: Vec<(String, DistillConfig)> = Vec::new();
        let mut add = |name: String, cfg: DistillConfig| {
            if !out.iter().any(|(_, c)| *c == cfg) {
                out.push((name, cfg));
            }
        };
        let base = DistillConfig {
            seed: stream_seed(self.seed, "distill"),
            ..self.distill.clone()
        };
        add("full".into(), DistillConfig { ablation: Ablation::Full, ..base.clone() });
        for &a in &self.sweep.ablations {
            add(a.name().into(), DistillConfig { ablation: a, ..base.clone() });
        }
        for &q in &self.sweep.mask_ratios {
            add(format!("q{}", q.label()), DistillConfig { mask_ratio: q, ablation: Ablation::Full, ..base.clone() });
        }
        out
    }

    /// Name of the trained student matching `cfg`.
    fn student_for(&self, cfg: &DistillConfig) -> String {
        self.students()
            .into_iter()
            .find(|(_, c)| c == cfg)
            .map(|(n, _)| n)
            .expect("every sweep entry has a student")
    }
}

/// Independent seed for a named stage, derived from the run seed.
pub fn stream_seed(seed: u64, stream: &str) -> u64 {
    let mut h = seed ^ 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// One teacher or student row of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub role: String,
    pub strategy: Strategy,
    /// Threshold for the threshold strategies, step budget for
    /// `fixed_steps`, empty for `one_per_step`.
    pub threshold: Option<f64>,
    pub steps_mean: f64,
    pub steps_std: f64,
    pub tokens_per_step: f64,
    pub accuracy: f64,
    /// Baseline steps mean over this row's steps mean.
    pub speedup: f64,
}

impl MetricsRow {
    pub fn new(run_id: &str, role: &str, cfg: &DecodeConfig, s: DecodeSummary, baseline_steps: f64) -> Self {
        let threshold = match cfg.strategy {
            Strategy::OnePerStep => None,
            Strategy::FixedSteps => Some(cfg.steps as f64),
            Strategy::ConfThreshold | Strategy::EntropyThreshold => Some(cfg.threshold),
        };
        MetricsRow {
            run_id: run_id.into(),
            role: role.into(),
            strategy: cfg.strategy,
            threshold,
            steps_mean: s.steps_mean,
            steps_std: s.steps_std,
            tokens_per_step: s.tokens_per_step,
            accuracy: s.accuracy,
            speedup: baseline_steps / s.steps_mean,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.run_id,
            self.role,
            self.strategy.name(),
            self.threshold.map(|t| format!("{t}")).unwrap_or_default(),
            self.steps_mean,
            self.steps_std,
            self.tokens_per_step,
            self.accuracy,
            self.speedup
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Student points whose speedup falls inside the teacher curve's range,
/// with the teacher accuracy linearly interpolated at that speedup.
/// Returns `(student_speedup, student_accuracy, teacher_accuracy)`.
pub fn shared_speedup_points(teacher: &[(f64, f64)], student: &[(f64, f64)]) -> Vec<(f64, f64, f64)> {
    let mut curve = teacher.to_vec();
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    if curve.is_empty() {
        return out;
    }
    for &(s, acc) in student {
        let lo = curve[0].0;
        let hi = curve[curve.len() - 1].0;
        if s < lo || s > hi {
            continue;
        }
        let k = curve.partition_point(|p| p.0 < s);
        let teacher_acc = if k < curve.len() && curve[k].0 == s {
            // average duplicates at exactly this speedup
            let same: Vec<f64> = curve.iter().filter(|p| p.0 == s).map(|p| p.1).collect();
            same.iter().sum::<f64>() / same.len() as f64
        } else {
            let (a, b) = (curve[k - 1], curve[k]);
            a.1 + (b.1 - a.1) * (s - a.0) / (b.0 - a.0)
        };
        out.push((s, acc, teacher_acc));
    }
    out
}

/// A parsed configuration bound to an output directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    source: String,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    run_id: &'a str,
    seed: u64,
    vocab_version: u32,
    stage: &'a str,
}

impl Experiment {
    /// Parses `source`, applies a seed override and prepares `out`.
    pub fn new(source: &str, out: &Path, seed: Option<u64>) -> Result<Self> {
        let mut config = ExperimentConfig::parse(source)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        config.model.seed = stream_seed(config.seed, "model");
        Ok(Experiment {
            config,
            source: source.to_string(),
            out: out.to_path_buf(),
        })
    }

    pub fn from_file(path: &Path, out: &Path, seed: Option<u64>) -> Result<Self> {
        let source = fs::read_to_string(path)?;
        Self::new(&source, out, seed)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Creates the output directory and echoes the configuration into it.
    fn begin(&self, stage: &str) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.path("config.toml"), &self.source)?;
        let info = RunInfo {
            run_id: &self.config.run_id,
            seed: self.config.seed,
            vocab_version: crate::tasks::VOCAB_VERSION,
            stage,
        };
        fs::write(self.path("run.json"), serde_json::to_string_pretty(&info).expect("run info serializes") + "\n")?;
        Ok(())
    }

    fn teacher(&self) -> Result<ModelParams> {
        load_checkpoint(&self.path(TEACHER_CKPT), Some(&self.config.model)).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::Usage(format!("no teacher checkpoint in {}; run pretrain first", self.out.display()))
            }
            other => other,
        })
    }

    fn student(&self, name: &str) -> Result<ModelParams> {
        let path = self.path(&format!("students/{name}.ckpt"));
        if !path.exists() {
            return Err(Error::Usage(format!("no student {name:?} in {}; run distill first", self.out.display())));
        }
        let student = load_checkpoint(&path, None)?;
        let base = ModelConfig {
            adapter_rank: self.config.model.adapter_rank,
            ..student.config.clone()
        };
        if base != self.config.model {
            return Err(Error::Checkpoint(format!("student {name:?} was trained from a different model config")));
        }
        Ok(student)
    }

    fn eval_set(&self) -> Result<Vec<TaskInstance>> {
        read_task_file(&self.path(EVAL_TASKS))
    }

    fn encode_prompts(&self, instances: &[TaskInstance]) -> Result<Vec<Vec<u32>>> {
        let vocab = Vocab::standard();
        instances.iter().map(|i| self.config.task.encode_prompt(&i.prompt, &vocab)).collect()
    }

    fn checker<'a>(&self, instances: &'a [TaskInstance]) -> impl Fn(usize, &TokenSeq) -> bool + Sync + 'a {
        let task = self.config.task.name();
        move |i, seq| check_answer(task, &instances[i].prompt, seq)
    }
}

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TRAIN_TASKS: &str = "train.jsonl";
pub const EVAL_TASKS: &str = "eval.jsonl";
pub const TRAJECTORIES: &str = "trajectories.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub iterations: usize,
    pub final_loss: f64,
    pub eval_accuracy: f64,
    pub eval_steps_mean: f64,
}

/// Trains the teacher with the masked-token objective at uniformly drawn
/// mask levels, then scores it with one-per-step decoding.
pub fn run_pretrain(exp: &Experiment) -> Result<PretrainReport> {
    exp.begin("pretrain")?;
    let cfg = &exp.config;
    let vocab = Vocab::standard();
    vocab.save(&exp.path("vocab.txt"))?;
    let (train, eval) = train_eval_split(&cfg.task, cfg.data.train_size, cfg.data.eval_size, stream_seed(cfg.seed, "split"))?;
    write_task_file(&exp.path(TRAIN_TASKS), &train)?;
    write_task_file(&exp.path(EVAL_TASKS), &eval)?;
    let seqs: Vec<Vec<TokenSeq>> = train
        .iter()
        .map(|i| cfg.task.encode_variants(i, cfg.data.response_len, &vocab, &cfg.data.response_formats))
        .collect::<Result<_>>()?;

    let mut model = init_model::<f32>(&cfg.model)?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "pretrain"));
    let p = &cfg.pretrain;
    let mut csv = String::from("iteration,learning_rate,loss\n");
    let mut window = 0.0;
    let mut window_len = 0usize;
    let mut last = f64::NAN;
    for it in 0..p.iterations {
        let lr = p.learning_rate_at(it);
        let mut batch = Vec::with_capacity(p.batch_size);
        for _ in 0..p.batch_size {
            let variants = &seqs[rng.random_range(0..seqs.len())];
            let x0 = &variants[rng.random_range(0..variants.len())];
            let t = MaskLevel::new(1.0 - rng.random::<f64>())?;
            batch.push((x0, forward_mask(x0, t, &mut rng), t));
        }
        let seq_len = batch[0].0.len();
        let tokens: Vec<u32> = batch.iter().flat_map(|b| b.1.tokens.iter().copied()).collect();
        let rec = model.forward_recorded(&tokens, batch.len())?;
        let width = seq_len * rec.logits.vocab;
        let mut grad = LogitMatrix::zeros(rec.logits.rows, rec.logits.vocab);
        let scale = 1.0 / batch.len() as f32;
        let mut loss = 0.0f64;
        for (b, (x0, state, t)) in batch.iter().enumerate() {
            let sub = LogitMatrix::new(seq_len, rec.logits.vocab, rec.logits.data[b * width..(b + 1) * width].to_vec());
            let scored = pretrain_loss(&sub, x0, state, *t)?;
            loss += scored.value as f64 / batch.len() as f64;
            for (g, s) in grad.data[b * width..(b + 1) * width].iter_mut().zip(&scored.grad.data) {
                *g = s * scale;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("pretraining loss {loss} at iteration {it} (learning rate {lr:.3e})")));
        }
        model.backward_and_step(rec, &grad, &mut adam, lr)?;
        window += loss;
        window_len += 1;
        if window_len == p.log_every || it + 1 == p.iterations {
            last = window / window_len as f64;
            writeln!(csv, "{},{:.6e},{:.6}", it + 1, lr, last).expect("string write");
            window = 0.0;
            window_len = 0;
        }
    }
    fs::write(exp.path("pretrain_loss.csv"), csv)?;
    save_checkpoint(&model, &exp.path(TEACHER_CKPT))?;

    let prompts = exp.encode_prompts(&eval)?;
    let s = summarize(&model, &prompts, &cfg.decode_config(Strategy::OnePerStep, 0.0), &exp.checker(&eval))?;
    let report = PretrainReport {
        iterations: p.iterations,
        final_loss: last,
        eval_accuracy: s.accuracy,
        eval_steps_mean: s.steps_mean,
    };
    write_json(&exp.path("pretrain_summary.json"), &report)?;
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("report serializes") + "\n")?;
    Ok(())
}

/// Decodes fresh prompts with the teacher and keeps the correct trajectories.
pub fn run_traject(exp: &Experiment) -> Result<crate::distill::RetentionStats> {
    exp.begin("traject")?;
    let cfg = &exp.config;
    let teacher = exp.teacher()?;
    let eval = exp.eval_set()?;
    let fresh = cfg.task.generate(cfg.data.distill_prompts, stream_seed(cfg.seed, "traject"))?;
    let instances = remove_leakage(&eval, fresh);
    let prompts = exp.encode_prompts(&instances)?;
    let (records, stats) = build_dataset(
        &teacher,
        &prompts,
        cfg.data.response_len,
        cfg.data.block_len,
        exp.checker(&instances),
        TEACHER_CKPT,
    )?;
    write_dataset(&exp.path(TRAJECTORIES), &records)?;
    write_json(&exp.path("retention.json"), &stats)?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillReport {
    pub student: String,
    pub iterations: usize,
    pub teacher_consistency: f64,
    pub teacher_certainty: f64,
    pub student_consistency: f64,
    pub student_certainty: f64,
}

/// Trains every configured student from the trajectory dataset.
pub fn run_distill(exp: &Experiment) -> Result<Vec<DistillReport>> {
    exp.begin("distill")?;
    let cfg = &exp.config;
    let teacher = exp.teacher()?;
    let dataset = read_dataset(&exp.path(TRAJECTORIES)).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::Usage(format!("no trajectories in {}; run traject first", exp.out.display()))
        }
        other => other,
    })?;
    let held = cfg.data.probe_records;
    if dataset.len() <= held {
        return Err(Error::Dataset(format!(
            "{} trajectories leave nothing to train on after holding out {held} for probes",
            dataset.len()
        )));
    }
    let (train, probe): (&[TrajectoryRecord], &[TrajectoryRecord]) = dataset.split_at(dataset.len() - held);
    fs::create_dir_all(exp.path("students"))?;
    let mut reports = Vec::new();
    let mut summary = String::from(
        "student,ablation,mask_ratio,iterations,teacher_consistency,teacher_certainty,student_consistency,student_certainty\n",
    );
    for (name, dcfg) in cfg.students() {
        let (student, report) = train_cfd(teacher.to_student(), train, &dcfg)?;
        save_checkpoint(&student, &exp.path(&format!("students/{name}.ckpt")))?;
        let mut curve = String::from("iteration,consistency,certainty,combined\n");
        for (i, l) in report.curve.iter().enumerate() {
            writeln!(curve, "{},{:.6},{:.6},{:.6}", i + 1, l.consistency, l.certainty, l.combined).expect("string write");
        }
        fs::write(exp.path(&format!("distill_loss_{name}.csv")), curve)?;

        // probes always use the default masking so students are comparable
        let probe_cfg = DistillConfig { ablation: Ablation::Full, ..cfg.distill.clone() };
        let states = probe_states(probe, held, &probe_cfg, stream_seed(cfg.seed, "probe"))?;
        let before = probe_loss(&teacher, &states, &probe_cfg)?;
        let after = probe_loss(&student, &states, &probe_cfg)?;
        let r = DistillReport {
            student: name.clone(),
            iterations: report.iterations,
            teacher_consistency: before.consistency,
            teacher_certainty: before.certainty,
            student_consistency: after.consistency,
            student_certainty: after.certainty,
        };
        writeln!(
            summary,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            name,
            dcfg.ablation.name(),
            dcfg.mask_ratio.label(),
            r.iterations,
            r.teacher_consistency,
            r.teacher_certainty,
            r.student_consistency,
            r.student_certainty
        )
        .expect("string write");
        reports.push(r);
    }
    fs::write(exp.path("distill_summary.csv"), summary)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Teacher and default-student rows over the decode grid.
    pub metrics: Vec<MetricsRow>,
    pub ablation: Vec<MetricsRow>,
    pub masking_ratio: Vec<MetricsRow>,
    /// `(student_speedup, student_accuracy, teacher_accuracy)` on the
    /// entropy-threshold curves.
    pub shared_points: Vec<(f64, f64, f64)>,
}

/// Evaluates teacher and students on the held-out prompts.
pub fn run_eval(exp: &Experiment) -> Result<EvalReport> {
    exp.begin("eval")?;
    let cfg = &exp.config;
    let teacher = exp.teacher()?;
    let student = exp.student("full")?;
    let eval = exp.eval_set()?;
    let prompts = exp.encode_prompts(&eval)?;
    let checker = exp.checker(&eval);
    let run_id = &cfg.run_id;

    let metrics = evaluate_pair(&teacher, &student, &prompts, &cfg.decode_grid(), &checker, run_id)?;
    fs::write(exp.path("metrics.csv"), metrics_csv(&metrics))?;

    let baseline_cfg = cfg.decode_config(Strategy::OnePerStep, 0.0);
    let baseline = summarize(&teacher, &prompts, &baseline_cfg, &checker)?.steps_mean;
    let headline = cfg.decode_config(Strategy::EntropyThreshold, cfg.eval.headline_threshold);
    let base = DistillConfig {
        seed: stream_seed(cfg.seed, "distill"),
        ..cfg.distill.clone()
    };
    let row_for = |label: String, dcfg: DistillConfig| -> Result<MetricsRow> {
        let model = exp.student(&cfg.student_for(&dcfg))?;
        let s = summarize(&model, &prompts, &headline, &checker)?;
        Ok(MetricsRow::new(&format!("{run_id}/{label}"), "student", &headline, s, baseline))
    };
    let ablation = cfg
        .sweep
        .ablations
        .iter()
        .map(|&a| row_for(a.name().into(), DistillConfig { ablation: a, ..base.clone() }))
        .collect::<Result<Vec<_>>>()?;
    fs::write(exp.path("ablation.csv"), metrics_csv(&ablation))?;
    let masking_ratio = cfg
        .sweep
        .mask_ratios
        .iter()
        .map(|&q| row_for(format!("q{}", q.label()), DistillConfig { mask_ratio: q, ablation: Ablation::Full, ..base.clone() }))
        .collect::<Result<Vec<_>>>()?;
    fs::write(exp.path("masking_ratio.csv"), metrics_csv(&masking_ratio))?;

    let curve = |role: &str| -> Vec<(f64, f64, f64)> {
        metrics
            .iter()
            .filter(|r| r.role == role && r.strategy == Strategy::EntropyThreshold)
            .map(|r| (r.threshold.unwrap_or(0.0), r.speedup, r.accuracy))
            .collect()
    };
    let (tc, sc) = (curve("teacher"), curve("student"));
    let mut tradeoff = String::from("role,threshold,speedup,accuracy\n");
    for (role, c) in [("teacher", &tc), ("student", &sc)] {
        for (t, s, a) in c {
            writeln!(tradeoff, "{role},{t},{s:.6},{a:.6}").expect("string write");
        }
    }
    fs::write(exp.path("tradeoff.csv"), tradeoff)?;
    let shared_points = shared_speedup_points(
        &tc.iter().map(|p| (p.1, p.2)).collect::<Vec<_>>(),
        &sc.iter().map(|p| (p.1, p.2)).collect::<Vec<_>>(),
    );
    let mut shared = String::from("speedup,student_accuracy,teacher_accuracy,advantage\n");
    for (s, sa, ta) in &shared_points {
        writeln!(shared, "{s:.6},{sa:.6},{ta:.6},{:.6}", sa - ta).expect("string write");
    }
    fs::write(exp.path("tradeoff_shared.csv"), shared)?;

    Ok(EvalReport {
        metrics,
        ablation,
        masking_ratio,
        shared_points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoleProfile {
    pub role: String,
    /// Commit step against response position, pooled over probes.
    pub rank_correlation: f64,
    /// Mean confidence over the early positions at the probe step.
    pub early_confidence: f64,
    /// Mean commit step per block under the headline entropy threshold.
    pub block_commit_steps: Vec<f64>,
}

fn decode_all(model: &ModelParams, prompts: &[Vec<u32>], cfg: &DecodeConfig) -> Result<Vec<DecodeResult>> {
    prompts.par_iter().map(|p| decode(model, p, cfg)).collect()
}

/// Certainty traces of teacher and default student over the probe prompts.
pub fn run_profile(exp: &Experiment) -> Result<Vec<RoleProfile>> {
    exp.begin("profile")?;
    let cfg = &exp.config;
    let pc = &cfg.profile;
    let eval = exp.eval_set()?;
    let probes = &eval[..pc.probes.min(eval.len())];
    let prompts = exp.encode_prompts(probes)?;
    let checker = exp.checker(probes);
    let resp_len = cfg.data.response_len;
    let block_len = cfg.data.block_len;
    let models = [("teacher", exp.teacher()?), ("student", exp.student("full")?)];

    let sequential = DecodeConfig {
        eos_fill: false,
        trace: true,
        ..DecodeConfig::new(Strategy::OnePerStep, resp_len, block_len)
    };
    let headline = DecodeConfig {
        eos_fill: false,
        trace: true,
        ..cfg.decode_config(Strategy::EntropyThreshold, cfg.eval.headline_threshold)
    };
    let probe_index = pc.probe_step - 1;
    let early = pc.early_positions.min(resp_len);

    let mut profiles = Vec::new();
    let mut summary = String::from("role,rank_correlation,probe_step,early_positions,early_mean_confidence\n");
    let mut blocks_csv = String::from("role,block,mean_commit_step\n");
    let mut sweep_csv = String::from("role,threshold,mean_committed_confidence,accuracy,steps_mean\n");
    for (role, model) in &models {
        let results = decode_all(model, &prompts, &sequential)?;
        let mut trace_csv = String::from(TRACE_CSV_HEADER);
        trace_csv.push('\n');
        let mut steps_csv = String::from("probe,step,mean_confidence,mean_entropy,committed\n");
        let mut by_position = vec![vec![0.0f64; resp_len]; resp_len];
        let mut by_position_n = vec![0usize; resp_len];
        let mut commit_sum = vec![0.0f64; resp_len];
        let (mut positions, mut commits) = (Vec::new(), Vec::new());
        let mut early_conf = Vec::new();
        let mut offset = 0;
        for (p, r) in results.iter().enumerate() {
            let tr = r.trace.as_ref().expect("tracing enabled");
            let mut buf = Vec::new();
            write_trace_rows(&mut buf, tr, offset)?;
            trace_csv.push_str(std::str::from_utf8(&buf).expect("ascii csv"));
            offset += r.steps_used;
            for (s, (conf, ent)) in tr.confidence.iter().zip(&tr.entropy).enumerate() {
                let committed = tr.commit_step.iter().filter(|&&c| c <= s).count();
                writeln!(
                    steps_csv,
                    "{p},{s},{:.6},{:.6},{committed}",
                    conf.iter().sum::<f64>() / resp_len as f64,
                    ent.iter().sum::<f64>() / resp_len as f64
                )
                .expect("string write");
                if s < resp_len {
                    for (i, c) in conf.iter().enumerate() {
                        by_position[s][i] += c;
                    }
                    by_position_n[s] += 1;
                }
                if s == probe_index && early > 0 {
                    early_conf.push(conf[..early].iter().sum::<f64>() / early as f64);
                }
            }
            for (i, &c) in tr.commit_step.iter().enumerate() {
                positions.push(i as f64);
                commits.push(c as f64);
                commit_sum[i] += c as f64;
            }
        }
        fs::write(exp.path(&format!("trace_{role}.csv")), trace_csv)?;
        fs::write(exp.path(&format!("steps_{role}.csv")), steps_csv)?;
        let mut table = String::from("step,position,mean_confidence\n");
        for (s, row) in by_position.iter().enumerate() {
            if by_position_n[s] == 0 {
                continue;
            }
            for (i, c) in row.iter().enumerate() {
                writeln!(table, "{s},{i},{:.6}", c / by_position_n[s] as f64).expect("string write");
            }
        }
        fs::write(exp.path(&format!("confidence_by_position_{role}.csv")), table)?;
        let mut commit_csv = String::from("position,mean_commit_step\n");
        for (i, c) in commit_sum.iter().enumerate() {
            writeln!(commit_csv, "{i},{:.6}", c / results.len().max(1) as f64).expect("string write");
        }
        fs::write(exp.path(&format!("commit_steps_{role}.csv")), commit_csv)?;

        let rank_correlation = spearman(&positions, &commits);
        let early_confidence = if early_conf.is_empty() {
            f64::NAN
        } else {
            early_conf.iter().sum::<f64>() / early_conf.len() as f64
        };
        writeln!(summary, "{role},{rank_correlation:.6},{},{early},{early_confidence:.6}", pc.probe_step)
            .expect("string write");

        let fast = decode_all(model, &prompts, &headline)?;
        let num_blocks = resp_len / block_len;
        let mut block_commit = vec![0.0f64; num_blocks];
        for r in &fast {
            let tr = r.trace.as_ref().expect("tracing enabled");
            for (i, &c) in tr.commit_step.iter().enumerate() {
                block_commit[i / block_len] += c as f64 / (block_len * fast.len().max(1)) as f64;
            }
        }
        for (b, c) in block_commit.iter().enumerate() {
            writeln!(blocks_csv, "{role},{b},{c:.6}").expect("string write");
        }

        for &t in &pc.conf_sweep {
            let sweep_cfg = DecodeConfig {
                eos_fill: false,
                trace: true,
                ..cfg.decode_config(Strategy::ConfThreshold, t)
            };
            let rs = decode_all(model, &prompts, &sweep_cfg)?;
            let mut conf_sum = 0.0;
            let mut conf_n = 0usize;
            let mut correct = 0usize;
            let mut steps = 0usize;
            for (i, r) in rs.iter().enumerate() {
                let tr = r.trace.as_ref().expect("tracing enabled");
                for (pos, &c) in tr.commit_step.iter().enumerate() {
                    conf_sum += tr.confidence[c][pos];
                    conf_n += 1;
                }
                correct += usize::from(checker(i, &r.output));
                steps += r.steps_used;
            }
            writeln!(
                sweep_csv,
                "{role},{t},{:.6},{:.6},{:.6}",
                conf_sum / conf_n.max(1) as f64,
                correct as f64 / rs.len().max(1) as f64,
                steps as f64 / rs.len().max(1) as f64
            )
            .expect("string write");
        }

        profiles.push(RoleProfile {
            role: role.to_string(),
            rank_correlation,
            early_confidence,
            block_commit_steps: block_commit,
        });
    }
    fs::write(exp.path("profile_summary.csv"), summary)?;
    fs::write(exp.path("commit_by_block.csv"), blocks_csv)?;
    fs::write(exp.path("confidence_sweep.csv"), sweep_csv)?;
    Ok(profiles)
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodedSample {
    pub prompt: String,
    pub response: String,
    pub correct: bool,
    pub steps_used: usize,
    pub tokens_per_step: f64,
}

/// Decodes prompts with one model and writes responses and traces.
pub fn run_decode(exp: &Experiment) -> Result<Vec<DecodedSample>> {
    exp.begin("decode")?;
    let cfg = &exp.config;
    let dc = &cfg.decode;
    let model = if dc.model == "teacher" { exp.teacher()? } else { exp.student(&dc.model)? };
    let instances: Vec<TaskInstance> = if dc.prompts.is_empty() {
        exp.eval_set()?.into_iter().take(dc.count).collect()
    } else {
        dc.prompts
            .iter()
            .map(|p| TaskInstance {
                task: cfg.task.name().into(),
                prompt: p.clone(),
                gold: String::new(),
            })
            .collect()
    };
    let prompts = exp.encode_prompts(&instances)?;
    let checker = exp.checker(&instances);
    let decode_cfg = DecodeConfig {
        steps: dc.steps,
        temperature: dc.temperature,
        seed: stream_seed(cfg.seed, "decode"),
        trace: true,
        ..cfg.decode_config(dc.strategy, dc.threshold)
    };
    let vocab = Vocab::standard();
    let mut trace_csv = String::from(TRACE_CSV_HEADER);
    trace_csv.push('\n');
    let mut lines = String::new();
    let mut samples = Vec::new();
    let mut offset = 0;
    for (i, p) in prompts.iter().enumerate() {
        let r = decode(&model, p, &decode_cfg)?;
        let mut buf = Vec::new();
        write_trace_rows(&mut buf, r.trace.as_ref().expect("tracing enabled"), offset)?;
        trace_csv.push_str(std::str::from_utf8(&buf).expect("ascii csv"));
        offset += r.steps_used;
        let sample = DecodedSample {
            prompt: instances[i].prompt.clone(),
            response: vocab.decode(r.output.response()),
            correct: checker(i, &r.output),
            steps_used: r.steps_used,
            tokens_per_step: r.tokens_per_step,
        };
        lines.push_str(&serde_json::to_string(&sample).expect("sample serializes"));
        lines.push('\n');
        samples.push(sample);
    }
    fs::write(exp.path("decoded.jsonl"), lines)?;
    fs::write(exp.path("decode_trace.csv"), trace_csv)?;
    Ok(samples)
}
