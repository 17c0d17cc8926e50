//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Criteria 4 to 9 run the full toy pipeline from
//! `configs/toy_addition.toml` under the cargo target directory.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::suites::{forward_mask_sigma, gradient_suite, semi_ar_exhaustive};
use maskdiff::decode::Strategy;
use maskdiff::diffusion::{semi_ar_mask_with_pattern, MaskLevel, TokenSeq};
use maskdiff::harness::{
    run_distill, run_eval, run_pretrain, run_profile, run_traject, DistillReport, EvalReport, Experiment, MetricsRow, RoleProfile,
    TEACHER_CKPT,
};
use maskdiff::losses::{certainty_loss, cfd_loss, consistency_loss, pretrain_loss};
use maskdiff::model::LogitMatrix;

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy_addition.toml");

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("criterion {id} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn gradients(report: &mut Report) {
    let start = Instant::now();
    let worst = gradient_suite(60, 2024);
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&e| e <= 1e-3) && elapsed < Duration::from_secs(60);
    report.line(
        1,
        "gradient suite",
        pass,
        format!(
            "60 instances, worst relative error pretrain {:.1e} consistency {:.1e} certainty {:.1e} combined {:.1e}, {:.1}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            elapsed.as_secs_f64()
        ),
    );
}

fn masking(report: &mut Report) {
    let start = Instant::now();
    let exhaustive = semi_ar_exhaustive(4, 4, 3);
    let sigmas: Vec<f64> = [(0.1, 1), (0.3, 2), (0.5, 3), (0.7, 4), (0.9, 5)]
        .iter()
        .map(|&(t, seed)| forward_mask_sigma(12, t, 10_000, seed))
        .collect();
    let elapsed = start.elapsed();
    let worst = sigmas.iter().copied().fold(0.0, f64::max);
    let pass = exhaustive == Ok(48) && worst < 3.0 && elapsed < Duration::from_secs(10);
    report.line(
        2,
        "masking exactness",
        pass,
        format!(
            "exhaustive {:?} patterns checked, forward mask worst deviation {worst:.2} sigma over 10k trials, {:.2}s",
            exhaustive,
            elapsed.as_secs_f64()
        ),
    );
}

fn identities(report: &mut Report) {
    let mut worst_ln_v = 0.0f64;
    let mut beta_zero_exact = true;
    let mut empty_guard = true;
    for vocab in [4usize, 7, 11] {
        let y = TokenSeq::new(vec![3, 2, 3, 0, 3, 2, 3, 2, 3], 1).unwrap();
        let uniform = LogitMatrix::new(9, vocab, vec![0.5; 9 * vocab]);
        let state = semi_ar_mask_with_pattern(&y, 0, 8, &[true; 8]).unwrap();
        let active = state.active_mask().to_vec();
        let ln_v = (vocab as f64).ln();
        let values = [
            pretrain_loss(&uniform, &y, &state, MaskLevel::new(1.0).unwrap()).unwrap().value,
            consistency_loss(&uniform, &y, &active).unwrap().value,
            certainty_loss(&uniform, &active, 0.5).unwrap().value,
        ];
        for v in values {
            worst_ln_v = worst_ln_v.max((v - ln_v).abs());
        }

        let mut skewed = uniform.clone();
        for (i, x) in skewed.data.iter_mut().enumerate() {
            *x = ((i * 7919) % 13) as f64 * 0.37 - 1.5;
        }
        let (b, grad) = cfd_loss(&skewed, &y, &active, 0.5, 0.0).unwrap();
        let c = consistency_loss(&skewed, &y, &active).unwrap();
        beta_zero_exact &= b.combined == c.value && grad.data == c.grad.data;

        // every active row puts its argmax away from the target: empty correct set
        let mut wrong = LogitMatrix::new(9, vocab, vec![0.0; 9 * vocab]);
        for &i in &active {
            let target = y.tokens[i] as usize;
            wrong.row_mut(i)[(target + 1) % vocab] = 3.0;
        }
        let (b, grad) = cfd_loss(&wrong, &y, &active, 0.5, 2.0).unwrap();
        let c = consistency_loss(&wrong, &y, &active).unwrap();
        empty_guard &= b.correct_count == 0 && b.certainty == 0.0 && b.combined == c.value && grad.data == c.grad.data;
        empty_guard &= certainty_loss(&wrong, &[], 0.5).unwrap().value == 0.0;
    }
    report.line(
        3,
        "loss identities",
        worst_ln_v <= 1e-6 && beta_zero_exact && empty_guard,
        format!("uniform |loss - ln V| <= {worst_ln_v:.1e}, beta=0 exact: {beta_zero_exact}, empty correct set guard: {empty_guard}"),
    );
}

struct Pipeline {
    exp: Experiment,
    teacher_accuracy: f64,
    pretrain_time: Duration,
    total_time: Duration,
    distill: Vec<DistillReport>,
    eval: EvalReport,
    profiles: Vec<RoleProfile>,
}

fn run_pipeline(out: &Path) -> maskdiff::Result<Pipeline> {
    let exp = Experiment::from_file(Path::new(CONFIG), out, None)?;
    let start = Instant::now();
    let pre = run_pretrain(&exp)?;
    let pretrain_time = start.elapsed();
    run_traject(&exp)?;
    let distill = run_distill(&exp)?;
    let eval = run_eval(&exp)?;
    let profiles = run_profile(&exp)?;
    Ok(Pipeline {
        exp,
        teacher_accuracy: pre.eval_accuracy,
        pretrain_time,
        total_time: start.elapsed(),
        distill,
        eval,
        profiles,
    })
}

fn find<'a>(rows: &'a [MetricsRow], run_suffix: &str, role: &str, strategy: Strategy, threshold: Option<f64>) -> Option<&'a MetricsRow> {
    rows.iter()
        .find(|r| r.run_id.ends_with(run_suffix) && r.role == role && r.strategy == strategy && r.threshold == threshold)
}

fn toy_criteria(report: &mut Report, p: &Pipeline) {
    for d in &p.distill {
        println!(
            "note: held-out probe certainty loss, student {} {:.4} vs teacher {:.4}; consistency {:.4} vs {:.4}",
            d.student, d.student_certainty, d.teacher_certainty, d.student_consistency, d.teacher_consistency
        );
    }
    report.line(
        4,
        "teacher quality",
        p.teacher_accuracy >= 0.95 && p.pretrain_time < Duration::from_secs(30 * 60),
        format!(
            "one-per-step exact match {:.3} on held-out 3-digit addition, pretrain {:.0}s",
            p.teacher_accuracy,
            p.pretrain_time.as_secs_f64()
        ),
    );

    let tau = p.exp.config.eval.headline_threshold;
    let rows = &p.eval.metrics;
    let baseline = find(rows, "", "teacher", Strategy::OnePerStep, None);
    let student = find(rows, "", "student", Strategy::EntropyThreshold, Some(tau));
    let (pass5, detail5) = match (baseline, student) {
        (Some(b), Some(s)) => (
            s.speedup >= 2.0 && b.accuracy - s.accuracy <= 0.02 && p.total_time < Duration::from_secs(90 * 60),
            format!(
                "student at entropy {tau}: {:.2}x fewer steps ({:.2} vs {:.2}), accuracy {:.3} vs teacher {:.3}, pipeline {:.0}s",
                s.speedup,
                s.steps_mean,
                b.steps_mean,
                s.accuracy,
                b.accuracy,
                p.total_time.as_secs_f64()
            ),
        ),
        _ => (false, "missing metrics rows".into()),
    };
    report.line(5, "step reduction", pass5, detail5);

    let ab = &p.eval.ablation;
    let get = |name: &str| find(ab, &format!("/{name}"), "student", Strategy::EntropyThreshold, Some(tau));
    let (pass6, detail6) = match (get("full"), get("consistency_only"), get("certainty_only")) {
        (Some(f), Some(c), Some(h)) => (
            c.speedup < f.speedup
                && (c.accuracy - f.accuracy).abs() <= 0.02
                && h.speedup > f.speedup
                && f.accuracy - h.accuracy >= 0.05,
            format!(
                "speedup/accuracy full {:.2}x/{:.3}, consistency_only {:.2}x/{:.3}, certainty_only {:.2}x/{:.3}",
                f.speedup, f.accuracy, c.speedup, c.accuracy, h.speedup, h.accuracy
            ),
        ),
        _ => (false, "missing ablation rows".into()),
    };
    report.line(6, "ablation", pass6, detail6);

    let role = |name: &str| p.profiles.iter().find(|r| r.role == name);
    let (pass7, detail7) = match (role("teacher"), role("student")) {
        (Some(t), Some(s)) => (
            t.rank_correlation > 0.8 && s.early_confidence > t.early_confidence,
            format!(
                "teacher commit-step rank correlation {:.3}; mean confidence over the first {} positions at step {}: student {:.3}, teacher {:.3}",
                t.rank_correlation,
                p.exp.config.profile.early_positions,
                p.exp.config.profile.probe_step,
                s.early_confidence,
                t.early_confidence
            ),
        ),
        _ => (false, "missing profiles".into()),
    };
    let csvs_written = ["profile_summary.csv", "trace_teacher.csv", "trace_student.csv", "commit_steps_teacher.csv"]
        .iter()
        .all(|f| p.exp.out.join(f).exists());
    report.line(7, "certainty dynamics", pass7 && csvs_written, detail7);

    let best = p
        .eval
        .shared_points
        .iter()
        .max_by(|a, b| (a.1 - a.2).total_cmp(&(b.1 - b.2)));
    let (pass8, detail8) = match best {
        Some(&(s, sa, ta)) => (
            sa - ta >= 0.05,
            format!(
                "best shared speedup {s:.2}x: student {sa:.3} vs teacher {ta:.3} ({} shared points)",
                p.eval.shared_points.len()
            ),
        ),
        None => (false, "no shared speedup points".into()),
    };
    report.line(8, "trade-off", pass8, detail8);
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let path = entry?.path();
        let dest = to.join(path.file_name().expect("file name"));
        if path.is_dir() {
            copy_dir(&path, &dest)?;
        } else {
            fs::copy(&path, dest)?;
        }
    }
    Ok(())
}

fn outputs(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            files.push((path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path)?));
        }
    }
    files.sort();
    Ok(files)
}

/// Reruns evaluation and profiling from the same checkpoints, and a short
/// pretraining run twice, comparing every table byte for byte.
fn determinism(report: &mut Report, first: &Pipeline, scratch: &Path) -> maskdiff::Result<()> {
    let again = scratch.join("rerun");
    let _ = fs::remove_dir_all(&again);
    fs::create_dir_all(&again)?;
    for f in [TEACHER_CKPT, "eval.jsonl", "train.jsonl"] {
        fs::copy(first.exp.out.join(f), again.join(f))?;
    }
    copy_dir(&first.exp.out.join("students"), &again.join("students"))?;
    let exp = Experiment::from_file(Path::new(CONFIG), &again, None)?;
    run_eval(&exp)?;
    run_profile(&exp)?;
    let original = outputs(&first.exp.out)?;
    let rerun = outputs(&again)?;
    let mut mismatched: Vec<String> = rerun
        .iter()
        .filter(|(name, bytes)| original.iter().find(|(n, _)| n == name).is_none_or(|(_, b)| b != bytes))
        .map(|(name, _)| name.clone())
        .collect();

    let short = short_pretrain_config(&fs::read_to_string(CONFIG)?);
    let mut pretrain_outputs = Vec::new();
    for name in ["short_a", "short_b"] {
        let dir = scratch.join(name);
        let _ = fs::remove_dir_all(&dir);
        let exp = Experiment::new(&short, &dir, None)?;
        run_pretrain(&exp)?;
        pretrain_outputs.push((fs::read(dir.join("pretrain_loss.csv"))?, fs::read(dir.join(TEACHER_CKPT))?));
    }
    if pretrain_outputs[0] != pretrain_outputs[1] {
        mismatched.push("short pretrain".into());
    }
    report.line(
        9,
        "determinism",
        mismatched.is_empty() && !rerun.is_empty(),
        if mismatched.is_empty() {
            format!("{} eval/profile tables and a repeated short pretrain are byte-identical", rerun.len())
        } else {
            format!("differing outputs: {}", mismatched.join(", "))
        },
    );
    Ok(())
}

fn short_pretrain_config(source: &str) -> String {
    let mut out = String::new();
    let mut section = String::new();
    for line in source.lines() {
        if line.starts_with('[') {
            section = line.to_string();
        }
        let line = match (section.as_str(), line.split_once(" = ")) {
            ("[pretrain]", Some(("iterations", _))) => "iterations = 60".to_string(),
            ("[pretrain]", Some(("warmup", _))) => "warmup = 10".to_string(),
            ("[data]", Some(("train_size", _))) => "train_size = 2000".to_string(),
            ("[data]", Some(("eval_size", _))) => "eval_size = 50".to_string(),
            _ => line.to_string(),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };
    gradients(&mut report);
    masking(&mut report);
    identities(&mut report);

    let scratch = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let out = scratch.join("toy_addition");
    let _ = fs::remove_dir_all(&out);
    match run_pipeline(&out) {
        Ok(p) => {
            toy_criteria(&mut report, &p);
            if let Err(e) = determinism(&mut report, &p, &scratch) {
                report.line(9, "determinism", false, format!("rerun failed: {e}"));
            }
        }
        Err(e) => {
            for (id, name) in [(4, "teacher quality"), (5, "step reduction"), (6, "ablation"), (7, "certainty dynamics"), (8, "trade-off"), (9, "determinism")] {
                report.line(id, name, false, format!("pipeline failed: {e}"));
            }
        }
    }
    println!("outputs in {}", out.display());
    if report.failures == 0 {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria fail", report.failures);
        ExitCode::FAILURE
    }
}
