use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparsetomo_core::io::ReadAudit;
use sparsetomo_core::pipeline::{run, Command, RunConfig};

#[derive(Parser)]
#[command(name = "sparsetomo", version, about = "Sparse 3D reconstruction from projections at unknown orientations")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Signed LASSO instead of the nonnegative one.
    #[arg(long, global = true)]
    allow_negative: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Draw random projections of a mixture into a profile stack.
    Simulate,
    /// Sparse deconvolution of every profile in the stack.
    Deconvolve,
    /// Estimate the Gram matrix, weights and kernel; write mixture and volume.
    Reconstruct,
    /// Compare a reconstruction with the truth.
    Evaluate,
    /// Write volume slices and residual maps as PGM images.
    Render,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let audit = ReadAudit::new();
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p, &audit),
        None => RunConfig::parse(""),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j).filter(|&j| j > 0);
    }
    cfg.allow_negative |= cli.allow_negative;
    let command = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::Deconvolve => Command::Deconvolve,
        Cmd::Reconstruct => Command::Reconstruct,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Render => Command::Render,
    };
    match run(command, &cfg, &audit) {
        Ok(report) => {
            print!("{}", report.format());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
