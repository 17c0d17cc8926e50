use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskdiff::harness::{run_decode, run_distill, run_eval, run_pretrain, run_profile, run_traject, Experiment};
use maskdiff::Result;

#[derive(Parser)]
#[command(name = "maskdiff", version, about = "Masked-diffusion LM lab: pretrain, distill, decode, evaluate")]
struct Cli {
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Subcommand)]
enum Stage {
    /// Train the teacher and write its checkpoint.
    Pretrain(Common),
    /// Build the teacher trajectory dataset.
    Traject(Common),
    /// Train the configured students.
    Distill(Common),
    /// Decode prompts with one model.
    Decode(Common),
    /// Write the teacher/student metrics tables.
    Eval(Common),
    /// Write certainty traces and profiles.
    Profile(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(stage: Stage) -> Result<String> {
    let (common, name) = match &stage {
        Stage::Pretrain(c) => (c, "pretrain"),
        Stage::Traject(c) => (c, "traject"),
        Stage::Distill(c) => (c, "distill"),
        Stage::Decode(c) => (c, "decode"),
        Stage::Eval(c) => (c, "eval"),
        Stage::Profile(c) => (c, "profile"),
    };
    let exp = Experiment::from_file(&common.config, &common.out, common.seed)?;
    let msg = match stage {
        Stage::Pretrain(_) => {
            let r = run_pretrain(&exp)?;
            format!(
                "final loss {:.4}, one-per-step accuracy {:.3} over held-out prompts",
                r.final_loss, r.eval_accuracy
            )
        }
        Stage::Traject(_) => {
            let s = run_traject(&exp)?;
            format!("kept {} of {} trajectories ({:.3})", s.retained, s.generated, s.retention)
        }
        Stage::Distill(_) => {
            let reports = run_distill(&exp)?;
            let names: Vec<_> = reports.iter().map(|r| r.student.as_str()).collect();
            format!("trained {}", names.join(", "))
        }
        Stage::Decode(_) => {
            let samples = run_decode(&exp)?;
            let correct = samples.iter().filter(|s| s.correct).count();
            format!("decoded {} prompts, {correct} correct", samples.len())
        }
        Stage::Eval(_) => {
            let r = run_eval(&exp)?;
            format!("{} metric rows", r.metrics.len() + r.ablation.len() + r.masking_ratio.len())
        }
        Stage::Profile(_) => {
            let p = run_profile(&exp)?;
            p.iter()
                .map(|r| format!("{}: rank correlation {:.3}", r.role, r.rank_correlation))
                .collect::<Vec<_>>()
                .join("; ")
        }
    };
    Ok(format!("{name}: {msg} -> {}", exp.out.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.stage) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
