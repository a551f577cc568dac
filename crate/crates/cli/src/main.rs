//! Batch front-end for the generating-function experiments.
//!
//! ```text
//!     gfdyn fixed-points --config cfg.json --out results
//!     gfdyn maslov       --config cfg.json
//!     gfdyn crossing     --config cfg.json --seed 7 --workers 4
//!     gfdyn verify
//! ```
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_tol_override, ExperimentConfig};

#[derive(Parser)]
#[command(name = "gfdyn", version, about = "Discrete action functionals: solve, index, cross, verify")]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// RNG seed, overriding the config's rng_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Tolerance override as key=value; repeatable.
    #[arg(long = "tol-override", value_parser = parse_tol_override, global = true)]
    tol_override: Vec<(String, f64)>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the fixed-point problem and write the critical records.
    FixedPoints,
    /// Index report for a configured symplectic path plus axis tables.
    Maslov,
    /// Run the crossing-energy experiment around a fixed axis.
    Crossing,
    /// Run the verification suites over the fixture corpus.
    Verify,
}

fn run(cli: &Cli) -> gfdyn::Result<()> {
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| gfdyn::GfError::Config(format!("worker pool: {e}")))?;
    }
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    for (key, value) in &cli.tol_override {
        cfg.override_tolerance(key, *value)?;
    }
    match cli.command {
        Command::FixedPoints => commands::cmd_fixed_points(&cfg),
        Command::Maslov => commands::cmd_maslov(&cfg),
        Command::Crossing => commands::cmd_crossing(&cfg),
        Command::Verify => commands::cmd_verify(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
