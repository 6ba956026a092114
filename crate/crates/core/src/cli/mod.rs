//! Command-line experiment runner.
//!
//! `sdb <experiment> --config FILE [--out DIR] [--seed N] [--threads N]`
//!
//! Exit status: 0 when every check passes, 1 for invalid input, 2 when a
//! numerical check fails or the computation itself breaks down.

mod artifacts;
pub mod config;
mod run;

pub use artifacts::{commit_atomically, resolve_output_dir, OUTPUT_ROOT_ENV};
pub use config::{DenoiserSpec, Experiment, ExperimentConfig, SamplerSpec};
pub use run::{execute, markovian_gap, variant_gaps, Artifact, Check, Outcome};

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "sdb",
    version,
    about = "Stochastic diffusion-bridge experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run whatever experiment the config names.
    Run(RunArgs),
    VerifySchedule(RunArgs),
    SimulateForward(RunArgs),
    Sample(RunArgs),
    TrainDenoiser(RunArgs),
    AfdStudy(RunArgs),
    ConvergenceStudy(RunArgs),
    ReformulationCheck(RunArgs),
}

impl Command {
    fn parts(&self) -> (Option<&'static str>, &RunArgs) {
        match self {
            Command::Run(a) => (None, a),
            Command::VerifySchedule(a) => (Some("verify-schedule"), a),
            Command::SimulateForward(a) => (Some("simulate-forward"), a),
            Command::Sample(a) => (Some("sample"), a),
            Command::TrainDenoiser(a) => (Some("train-denoiser"), a),
            Command::AfdStudy(a) => (Some("afd-study"), a),
            Command::ConvergenceStudy(a) => (Some("convergence-study"), a),
            Command::ReformulationCheck(a) => (Some("reformulation-check"), a),
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: `<root>/runs/<experiment>-seed<seed>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Errors caused by the input rather than by the numerics.
fn is_input_error(e: &Error) -> bool {
    match e {
        Error::InvalidParameter(_)
        | Error::Format(_)
        | Error::Io(_)
        | Error::DimensionMismatch { .. }
        | Error::InsufficientSamples { .. }
        | Error::InsufficientReplicates { .. } => true,
        Error::Step { source, .. } | Error::AtTime { source, .. } => is_input_error(source),
        _ => false,
    }
}

fn fail(e: &Error) -> i32 {
    if is_input_error(e) {
        log::error!("invalid input: {e}");
        EXIT_INVALID
    } else {
        log::error!("numerical failure: {e}");
        EXIT_NUMERICAL
    }
}

/// Parses arguments, runs the experiment and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
        }
    };
    let (expected, args) = cli.command.parts();
    if let Some(n) = args.threads {
        if n == 0 {
            log::error!("--threads must be positive");
            return EXIT_INVALID;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let name = cfg.experiment.name();
    if let Some(expected) = expected {
        if expected != name {
            log::error!("subcommand {expected} does not match config experiment {name}");
            return EXIT_INVALID;
        }
    }
    let config_dir = args.config.parent().unwrap_or(Path::new("."));
    let out_dir = resolve_output_dir(args.out.as_deref(), &cfg);
    run_to_dir(&cfg, config_dir, &out_dir)
}

/// Executes `cfg` and commits artifacts plus `manifest.json` to `out_dir`.
/// Nothing is written unless the experiment runs to completion.
pub fn run_to_dir(cfg: &ExperimentConfig, config_dir: &Path, out_dir: &Path) -> i32 {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    log::info!("running {} (seed {})", cfg.experiment.name(), cfg.seed);
    let outcome = match execute(cfg, config_dir) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    for c in &outcome.checks {
        let status = if c.pass { "pass" } else { "FAIL" };
        log::info!("{status}: {} = {:e} ({})", c.name, c.value, c.limit);
    }
    let status = if outcome.passed() {
        EXIT_OK
    } else {
        EXIT_NUMERICAL
    };
    let mut names: Vec<&str> = outcome.artifacts.iter().map(|a| a.name.as_str()).collect();
    names.sort_unstable();
    let manifest = json!({
        "experiment": cfg.experiment.name(),
        "seed": cfg.seed,
        "config": cfg,
        "versions": { "sdb": env!("CARGO_PKG_VERSION") },
        "started_unix_s": started,
        "wall_time_s": clock.elapsed().as_secs_f64(),
        "status": if status == EXIT_OK { "pass" } else { "fail" },
        "checks": outcome.checks,
        "artifacts": names,
    });
    let mut files = outcome.artifacts;
    match serde_json::to_vec_pretty(&manifest) {
        Ok(mut bytes) => {
            bytes.push(b'\n');
            files.push(Artifact {
                name: "manifest.json".into(),
                bytes,
            });
        }
        Err(e) => return fail(&Error::Format(e.to_string())),
    }
    if let Err(e) = commit_atomically(out_dir, &files) {
        log::error!("writing {}: {e}", out_dir.display());
        return EXIT_INVALID;
    }
    log::info!("artifacts in {}", out_dir.display());
    status
}
