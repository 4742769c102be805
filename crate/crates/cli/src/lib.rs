//! Config-driven experiment runner around the `smcdo` engine.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;

use clap::{Parser, Subcommand};
use smcdo::Error;
use std::ffi::OsString;
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        Error::Data(_) | Error::Io(_) | Error::WeightFormat(_) | Error::Dimension { .. } | Error::InvalidShape(_) => EXIT_DATA,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(name = "smcdo", version, about = "Spatial Monte Carlo dropout experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Weight file, or a directory of member*.bin files.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the training and evaluation seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    Train,
    Eval,
    Sweep,
    Bench,
    CorruptPreview,
}

fn execute(cli: &Cli) -> smcdo::Result<()> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = config::ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    let checkpoint = cli.checkpoint.as_deref();
    match cli.command {
        Command::Train => {
            for p in commands::cmd_train(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval => {
            let reports = commands::cmd_eval(&cfg, checkpoint)?;
            println!("{} conditions -> {}", reports.len(), cfg.output_dir.join("results.csv").display());
        }
        Command::Sweep => {
            let out = commands::cmd_sweep(&cfg, checkpoint, cli.threads)?;
            println!(
                "{} cells ({} computed, {} reused) -> {}",
                out.reports.len(),
                out.computed,
                out.reused,
                cfg.output_dir.join("results.csv").display()
            );
        }
        Command::Bench => {
            for r in commands::cmd_bench(&cfg, checkpoint)? {
                println!("{:<20} median {:>9.3} ms  overhead {:.2}x  flops {}", r.executor, r.median_ms, r.overhead, r.flops);
            }
        }
        Command::CorruptPreview => {
            let paths = commands::cmd_corrupt_preview(&cfg)?;
            println!("wrote {} preview images to {}", paths.len(), cfg.output_dir.join("preview").display());
        }
    }
    Ok(())
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
