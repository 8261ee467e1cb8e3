use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use bigraph_core::data::io::write_sample_set;
use bigraph_core::data::{DataConfig, Dataset, Split};
use bigraph_core::train::{ablate, evaluate_checkpoint, infer, train, SampleSource, TrainConfig};
use clap::{Parser, Subcommand};

/// Pose-guided person image generation with bipartite graph reasoning.
#[derive(Parser)]
#[command(name = "bigraph", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint and print a JSON report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Number of samples; defaults to the checkpoint's `eval_samples`.
        #[arg(long)]
        n: Option<usize>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one image from a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out sample index, or a sample JSON written by `datagen`.
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic samples as PNG files with a JSON index.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
        /// Optional configuration supplying image size and split sizes.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the six ablation baselines B1..B6 and compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn progress(prefix: &str, every: usize, started: Instant) -> impl FnMut(&bigraph_core::train::LossRow) + '_ {
    move |row| {
        if every > 0 && row.step % every == 0 {
            eprintln!(
                "{prefix}step {:>6}  L_full {:.4}  L_l1 {:.4}  L_per {:.4}  L_gan_G {:.4}  D_app {:.4}  D_shape {:.4}  ({:.1}s)",
                row.step,
                row.full,
                row.l1,
                row.per,
                row.gan_g,
                row.gan_d_app,
                row.gan_d_shape,
                started.elapsed().as_secs_f64()
            );
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let outcome = train(&cfg, progress("", cfg.log_every, Instant::now()))?;
            println!("{}", serde_json::to_string_pretty(&outcome.report)?);
            eprintln!("run written to {}", outcome.run_dir.display());
        }
        Command::Evaluate {
            checkpoint,
            split,
            n,
            out,
        } => {
            let split: Split = split.parse()?;
            let report = evaluate_checkpoint(&checkpoint, split, n)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{text}");
        }
        Command::Infer {
            checkpoint,
            sample,
            out,
        } => {
            let source: SampleSource = sample.parse()?;
            let paths = infer(&checkpoint, &source, &out)?;
            println!("{}", paths.output.display());
        }
        Command::Datagen {
            out,
            n,
            seed,
            split,
            config,
        } => {
            let mut data = match config {
                Some(path) => load_config(&path)?.data(),
                None => DataConfig::default(),
            };
            data.seed = seed;
            let dataset = Dataset::new(data)?;
            let index = write_sample_set(&out, &dataset, split.parse()?, n)?;
            println!("wrote {} samples to {}", index.samples.len(), out.display());
        }
        Command::Ablate { config } => {
            let cfg = load_config(&config)?;
            let started = Instant::now();
            let every = cfg.log_every;
            let entries = ablate(&cfg, |name, row| {
                if every > 0 && row.step % every == 0 {
                    eprintln!("{name} step {:>6}  L_full {:.4}  ({:.1}s)", row.step, row.full, started.elapsed().as_secs_f64());
                }
            })?;
            println!("{:<4} {:>8} {:>10} {:>9} {:>12}", "run", "SSIM", "Mask-SSIM", "keypoint", "params");
            for e in &entries {
                println!(
                    "{:<4} {:>8.4} {:>10.4} {:>9.4} {:>12}",
                    e.name, e.report.ssim, e.report.mask_ssim, e.report.keypoint_error, e.generator_params
                );
            }
        }
    }
    Ok(())
}
