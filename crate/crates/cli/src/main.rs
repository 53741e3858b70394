//! `depthrnn`: pretrain a toy backbone, fine-tune depth-recurrent cells on it,
//! evaluate, trace and gradient-check, all from one JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "depthrnn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config; omitted fields take the desk-scale defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory (overrides `paths.out`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate data, pretrain the backbone on the biased corpus, freeze and save it
    Pretrain,
    /// Fine-tune one cell against the frozen backbone
    Finetune {
        /// overrides the config mode
        #[arg(long)]
        mode: Option<String>,
    },
    /// Score a model on the eval set, per split
    Eval {
        #[arg(long)]
        mode: Option<String>,
    },
    /// Per-layer lens probabilities and gates for prompts where vanilla and the cell disagree
    Trace {
        #[arg(long)]
        mode: Option<String>,
    },
    /// Fine-tune and score every configured variant from the same backbone
    Ablate,
    /// Finite-difference check of the cells and the full recurrence
    Gradcheck,
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DEPTHRNN_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("DEPTHRNN_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.paths.out = o;
    }
    let set_mode = |cfg: &mut RunConfig, m: Option<String>| -> Result<()> {
        if let Some(m) = m {
            cfg.mode = m;
            cfg.validate()?;
        }
        Ok(())
    };
    std::fs::create_dir_all(&cfg.paths.out)
        .with_context(|| format!("creating output directory {}", cfg.paths.out.display()))?;
    match cli.command {
        Command::Pretrain => commands::pretrain(&cfg)?,
        Command::Finetune { mode } => {
            set_mode(&mut cfg, mode)?;
            commands::finetune(&cfg)?
        }
        Command::Eval { mode } => {
            set_mode(&mut cfg, mode)?;
            commands::eval(&cfg)?
        }
        Command::Trace { mode } => {
            set_mode(&mut cfg, mode)?;
            commands::trace(&cfg)?
        }
        Command::Ablate => commands::ablate(&cfg)?,
        Command::Gradcheck => {
            if !commands::gradcheck(&cfg)? {
                return Ok(ExitCode::from(2));
            }
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
