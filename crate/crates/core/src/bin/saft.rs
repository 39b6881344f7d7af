use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use saft::config::RunConfig;
use saft::gradcheck::{format_row, GRAD_TOLERANCE};
use saft::run::{self, FloatMode, FLOAT_ENV};

#[derive(Parser)]
#[command(name = "saft", about = "One-shot detection with attention-based fusion necks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set neck=fpn+hfm`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let cfg = RunConfig::load(self.config.as_deref(), &self.overrides).context("loading configuration")?;
        let out = self.out.clone().unwrap_or_else(|| cfg.out.clone());
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train on base-class episodes; writes loss.csv and ckpt-{iter}.bin.
    Train(Common),
    /// Evaluate a checkpoint on the configured split; writes report.csv.
    Eval(Common),
    /// Fused-feature heatmaps and a detection overlay for one episode.
    Viz(Common),
    /// Finite-difference check of every primitive, neck and the full model.
    Gradcheck(Common),
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Train(c) => {
            let (cfg, out) = c.resolve()?;
            let total = cfg.train.iterations;
            let outcome = run::train(&cfg, &out, |l| {
                if l.iter % 50 == 0 || l.iter + 1 == total {
                    println!(
                        "iter {:>5}  total {:.4}  cls {:.4}  reg {:.4}  ctn {:.4}",
                        l.iter, l.loss.total, l.loss.cls, l.loss.reg, l.loss.ctn
                    );
                }
            })?;
            if let Some(last) = outcome.checkpoints.last() {
                println!("wrote {} and {}", out.join("loss.csv").display(), last.display());
            }
        }
        Command::Eval(c) => {
            let (cfg, out) = c.resolve()?;
            let report = run::eval(&cfg, &out)?;
            print!("{}", report.summary(cfg.eval.split.name()));
            println!("wrote {}", out.join("report.csv").display());
        }
        Command::Viz(c) => {
            let (cfg, out) = c.resolve()?;
            let v = run::visualize(&cfg, &out)?;
            for (_, p) in &v.heatmaps {
                println!("wrote {}", p.display());
            }
            println!(
                "wrote {} (class {}, {} detections)",
                v.overlay.display(),
                v.episode.class_id,
                v.detections
            );
        }
        Command::Gradcheck(c) => {
            let (_, out) = c.resolve()?;
            let mode = FloatMode::from_env()?;
            println!("precision: {mode:?} ({FLOAT_ENV}), tolerance {GRAD_TOLERANCE:e}");
            let rows = run::gradcheck(mode, &out, |r| println!("{}", format_row(r)))?;
            let failed = rows.iter().filter(|r| !r.passed()).count();
            println!("{} rows, {failed} failed", rows.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
