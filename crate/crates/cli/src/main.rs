use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psclab_core::commands;
use psclab_core::{Error, Result, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "psclab", version, about = "Rotary phase shift calibration experiments")]
struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for reports and checkpoints.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the top-level seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the per-pair frequencies of the configured schedule.
    Schedule,
    /// Sweeps the rank of the rotation shift over shifted-pair counts.
    Rank,
    /// Fine-tunes the toy model on the configured corpus.
    Train {
        /// Continues from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stops after this many total optimiser steps.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Sliding-window perplexity of a checkpoint.
    Ppl {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Passkey retrieval accuracy.
    Passkey {
        #[arg(long, required_unless_present = "echo_oracle")]
        checkpoint: Option<PathBuf>,
        /// Scores the reference model that copies the key from its context.
        #[arg(long)]
        echo_oracle: bool,
    },
    /// LoRA-only against LoRA plus calibration on the synthetic teacher.
    Diagnostic,
    /// Phase and norm distribution of query embeddings.
    Dist {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("PSCLAB_THREADS") else {
        return Ok(());
    };
    let n: usize =
        raw.parse().map_err(|_| Error::Config(format!("PSCLAB_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out: &Path = &cli.out;
    std::fs::create_dir_all(out)?;
    Ok(match cli.command {
        Command::Schedule => {
            let csv = commands::schedule_dump(&cfg)?;
            print!("{csv}");
            vec![commands::write_report(out, commands::SCHEDULE_FILE, &csv)?]
        }
        Command::Rank => {
            let csv = commands::rank_report(&cfg)?;
            print!("{csv}");
            vec![commands::write_report(out, commands::RANK_FILE, &csv)?]
        }
        Command::Train { resume, stop_after } => {
            let done = commands::train(&cfg, out, resume.as_deref(), stop_after)?;
            eprintln!("trained {} steps, final loss {:.4}", done.steps, done.final_loss);
            vec![done.checkpoint, done.history]
        }
        Command::Ppl { checkpoint } => vec![commands::ppl(&cfg, &checkpoint, out)?],
        Command::Passkey { checkpoint, echo_oracle } => {
            vec![commands::passkey(&cfg, checkpoint.as_deref(), echo_oracle, out)?]
        }
        Command::Diagnostic => vec![commands::diagnostic(&cfg, out)?],
        Command::Dist { checkpoint } => {
            let (stats, hist) = commands::dist(&cfg, &checkpoint, out)?;
            vec![stats, hist]
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
