//! Batch CLI for reaction-diffusion glioma growth simulation and inversion.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O error. Diagnostics go to stderr; data goes to stdout and files.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use glioma_core::error::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "glioma",
    about = "Reaction-diffusion glioma growth: synthetic data, forward runs, inversion, reports",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file (flat key = value with [section] headers); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Grid dims, e.g. 64,64 or 32,32,32 (domain stays 64 mm across).
    #[arg(long, global = true)]
    grid: Option<String>,

    /// Time steps per unit interval.
    #[arg(long, global = true)]
    nt: Option<usize>,

    /// Reaction coefficient.
    #[arg(long, global = true, allow_negative_numbers = true)]
    rho: Option<f64>,

    /// Anisotropy scale (simulation value / inversion target truth).
    #[arg(long, global = true, allow_negative_numbers = true)]
    kf: Option<f64>,

    /// Detection thresholds, comma separated.
    #[arg(long, global = true)]
    cd: Option<String>,

    /// Noise levels, comma separated.
    #[arg(long, global = true)]
    eta: Option<String>,

    /// Tikhonov regularization weight.
    #[arg(long, global = true, allow_negative_numbers = true)]
    beta: Option<f64>,

    /// RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Test case preset (1-4).
    #[arg(long, global = true)]
    case: Option<u8>,

    /// Diffusion tensor mode: full_fa or principal.
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Hessian mode: gn or full.
    #[arg(long, global = true)]
    hessian: Option<String>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Experiment-grid parallelism (report only; capped by GLIO_THREADS).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Validate the configuration and print the resolved parameters only.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic anatomy and target volumes.
    Synth,
    /// Run the forward growth model and export the trajectory.
    Forward,
    /// Invert one (threshold, noise) cell and write the reconstruction.
    Invert,
    /// Sweep the regularization weight and locate the L-curve corner.
    Lcurve,
    /// Run the full threshold x noise grid and emit the metrics table.
    Report,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidParam(_) | Error::GridMismatch(_) => 2,
        Error::Io(_) | Error::BadVolume(_) => 4,
        Error::NonFinite { .. }
        | Error::CgDidNotConverge { .. }
        | Error::NotPsd { .. }
        | Error::SingularHkk(_)
        | Error::LineSearchFailed(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let cfg = match RunConfig::resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    if cfg.dry_run {
        cfg.print_resolved();
        return ExitCode::SUCCESS;
    }
    let run = || -> glioma_core::error::Result<u8> {
        commands::ensure_out_dir(&cfg.out)?;
        match cli.command {
            Command::Synth => commands::cmd_synth(&cfg).map(|()| 0u8),
            Command::Forward => commands::cmd_forward(&cfg).map(|()| 0u8),
            Command::Invert => commands::cmd_invert(&cfg).map(|c| c as u8),
            Command::Lcurve => commands::cmd_lcurve(&cfg).map(|()| 0u8),
            Command::Report => commands::cmd_report(&cfg).map(|()| 0u8),
        }
    };
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
