//! Batch command-line interface: binds experiment configs to the numerical
//! library and emits machine-readable reports.
//!
//! Exit codes: 0 when every configured check passes, 2 when a check fails,
//! 1 on execution errors (malformed config, IO, estimator aborts).

mod commands;
mod config;
mod gen;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "optfield",
    version,
    about = "Transport-loss experiments over convex-potential velocity fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON; see configs/ for the shipped defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's sample count.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Output directory for report.json and artifacts (default from the
    /// config, falling back to ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the conjugate solver's stationarity tolerance.
    #[arg(long = "conj-tol", global = true)]
    conj_tol: Option<f64>,
    /// Override the conjugate solver's iteration budget.
    #[arg(long = "conj-max-iters", global = true)]
    conj_max_iters: Option<usize>,
    /// Worker thread cap (falls back to the OPTFIELD_THREADS variable, then
    /// to all cores). Results do not depend on the thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Check that the field's interior integrand vanishes, analytically and
    /// under a finite-difference audit.
    VerifyBracket,
    /// Check that the action-matching and dual losses differ by the
    /// second-moment constant, for every configured path.
    VerifyTheorem,
    /// Check that the flow-matching loss of the optimal field is twice the
    /// dual loss plus a plan constant.
    VerifyOfmRelation,
    /// Minimize a loss over potential parameters; optionally compare the
    /// result with the closed-form Gaussian solution.
    SolveOt,
    /// Integrate samples through the field and dump start/end points.
    PushSamples,
}

fn run(cli: &Cli) -> Result<bool> {
    let threads = cli.threads.or_else(|| {
        std::env::var("OPTFIELD_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(threads) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }

    let config_path = cli
        .config
        .as_ref()
        .context("--config is required (shipped defaults live in configs/)")?;
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.n {
        cfg.n_samples = n;
    }
    if let Some(tol) = cli.conj_tol {
        cfg.conjugate.tol = tol;
    }
    if let Some(iters) = cli.conj_max_iters {
        cfg.conjugate.max_iters = iters;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));

    match cli.command {
        Command::VerifyBracket => commands::verify_bracket(&cfg, &out),
        Command::VerifyTheorem => commands::verify_theorem(&cfg, &out),
        Command::VerifyOfmRelation => commands::verify_ofm_relation(&cfg, &out),
        Command::SolveOt => commands::solve_ot(&cfg, &out),
        Command::PushSamples => commands::push_samples(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
