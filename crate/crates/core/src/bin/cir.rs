use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use cir_core::io::{self, LoadedConfig};

#[derive(Parser)]
#[command(name = "cir", version, about = "Composed image retrieval in embedding space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and its evaluation task.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: paths.data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train both mappers and write a checkpoint plus the metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the training pairs (default: paths.data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (default: paths.run_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mine the semantic set of an image/text embedding pair file.
    MineSset {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        texts: PathBuf,
        #[arg(long, default_value_t = cir_core::sset::DEFAULT_SIGMA)]
        sigma: f32,
        #[arg(long, default_value_t = cir_core::sset::DEFAULT_LAMBDA)]
        lambda: f32,
        /// Mine consecutive blocks of this many rows instead of the whole file.
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the evaluation task and write a JSON report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report path (default: paths.report).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gamma: Option<f32>,
    },
    /// Compose a single query and show its nearest gallery items.
    Compose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        query_id: String,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gamma: Option<f32>,
    },
}

fn load(config: &Path, seed: Option<u64>, gamma: Option<f32>) -> Result<LoadedConfig> {
    let mut cfg = LoadedConfig::load(config, seed)?;
    if let Some(g) = gamma {
        cfg.config.set_gamma(g).context("--gamma")?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = load(&config, seed, None)?;
            let files = io::cmd_gen_data(&cfg, out.as_deref())?;
            println!("wrote world to {}", files.dir.display());
        }
        Command::Train {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = load(&config, seed, None)?;
            let art = io::cmd_train(&cfg, data.as_deref(), out.as_deref())?;
            println!(
                "trained {} steps; checkpoint {}",
                art.manifest.steps,
                art.checkpoint.display()
            );
        }
        Command::MineSset {
            images,
            texts,
            sigma,
            lambda,
            batch_size,
            out,
        } => {
            let rows = io::cmd_mine_sset(&images, &texts, sigma, lambda, batch_size, &out)?;
            let n = rows.iter().filter(|r| r.selected).count();
            println!("{} of {} rows selected; wrote {}", n, rows.len(), out.display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            data,
            out,
            seed,
            gamma,
        } => {
            let cfg = load(&config, seed, gamma)?;
            let (path, report) =
                io::cmd_evaluate(&cfg, checkpoint.as_deref(), data.as_deref(), out.as_deref())?;
            println!("{}", serde_json::to_string(&report["metrics"])?);
            println!("wrote {}", path.display());
        }
        Command::Compose {
            config,
            checkpoint,
            data,
            query_id,
            top,
            out,
            seed,
            gamma,
        } => {
            let cfg = load(&config, seed, gamma)?;
            let v = io::cmd_compose(&cfg, checkpoint.as_deref(), data.as_deref(), &query_id, top)?;
            match out {
                Some(p) => io::write_json(&p, &v)?,
                None => println!("{}", serde_json::to_string_pretty(&v)?),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
