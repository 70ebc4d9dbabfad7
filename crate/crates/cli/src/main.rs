use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use capsnet::data::{Axis, STANDARD_ANGLES};
use capsnet::harness::{
    cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_pretrain, cmd_robustness, cmd_sensitivity, cmd_train, eval_csv,
    robustness_csv, sensitivity_csv, SynthKind, TrainConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "capsnet", version, about = "Capsule-network segmentation engine")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for single-table commands)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    deterministic: Option<bool>,
    /// Override one configuration key, e.g. `--set learning_rate=0.001`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Shapes2d,
    Blobs3d,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    GenData {
        #[arg(long, value_enum, default_value = "shapes2d")]
        kind: Kind,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
    /// Pretext pretraining of the feature extractor
    Pretrain {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised training
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class Dice, precision and recall of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Finite-difference check of the tiny capsule net
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        routing_iters: usize,
    },
    /// Dice under rotations of the input volume
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated angles in degrees
        #[arg(long, value_delimiter = ',')]
        angles: Option<Vec<f64>>,
        /// Comma-separated axes out of x, y, z, all
        #[arg(long, value_delimiter = ',', default_value = "x,y,z,all")]
        axes: Vec<Axis>,
    },
    /// Label and probability change under a one-pixel shift
    Sensitivity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn resolve_config(c: &Common, dataset: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("--set {o:?}: expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim(), None)?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(d) = c.deterministic {
        cfg.deterministic = d;
    }
    if let Some(d) = dataset {
        cfg.dataset = Some(d.to_path_buf());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path> {
    match &c.out {
        Some(p) => Ok(p),
        None => bail!("--out DIR is required for this command"),
    }
}

/// Writes a table to `--out` when given, otherwise prints it.
fn emit(c: &Common, text: &str) -> Result<()> {
    match &c.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let c = &cli.common;
    match &cli.command {
        Command::GenData { kind, count, size, classes } => {
            let kind = match kind {
                Kind::Shapes2d => SynthKind::Shapes2d,
                Kind::Blobs3d => SynthKind::Blobs3d,
            };
            let out = out_dir(c)?;
            let data = cmd_gen_data(kind, c.seed.unwrap_or(0), *count, *size, *classes, out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Pretrain { dataset, resume } => {
            let cfg = resolve_config(c, dataset.as_deref())?;
            let r = cmd_pretrain(&cfg, out_dir(c)?, resume.as_deref())?;
            println!("{:?} after {} iterations; wrote {}", r.summary.stop, r.iteration, r.checkpoint.display());
        }
        Command::Train { dataset, resume } => {
            let cfg = resolve_config(c, dataset.as_deref())?;
            let r = cmd_train(&cfg, out_dir(c)?, resume.as_deref())?;
            println!(
                "{:?} after {} iterations; validation dice {} (all-background {}); wrote {}",
                r.summary.stop,
                r.iteration,
                r.summary.final_metric.map(|d| d.to_string()).unwrap_or_else(|| "n/a".into()),
                r.baseline_dice,
                r.checkpoint.display()
            );
        }
        Command::Eval { checkpoint, dataset } => {
            let cfg = resolve_config(c, None)?;
            let m = cmd_eval(&cfg, checkpoint, dataset.as_deref(), None)?;
            emit(c, &eval_csv(&m))?;
        }
        Command::Gradcheck { routing_iters } => {
            let report = cmd_gradcheck(c.seed.unwrap_or(0), *routing_iters, None)?;
            emit(c, &format!("{report}\n"))?;
            if !report.passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Robustness { checkpoint, dataset, angles, axes } => {
            let cfg = resolve_config(c, None)?;
            let angles = angles.clone().unwrap_or_else(|| STANDARD_ANGLES.to_vec());
            let rows = cmd_robustness(&cfg, checkpoint, dataset.as_deref(), axes, &angles, None)?;
            emit(c, &robustness_csv(&rows))?;
        }
        Command::Sensitivity { checkpoint, dataset } => {
            let cfg = resolve_config(c, None)?;
            let (per, mean) = cmd_sensitivity(&cfg, checkpoint, dataset.as_deref(), None)?;
            emit(c, &sensitivity_csv(&per, &mean))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
