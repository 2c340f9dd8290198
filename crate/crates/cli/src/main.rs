//! `mgcp`: fit multi-output transfer models on CSV data, rerun the
//! simulation studies, and sweep the penalty weight.
//!
//! Exit codes: 0 success, 1 output error, 2 configuration or usage error,
//! 3 data error, 4 optimization failure. `MGCP_THREADS` caps the worker
//! pool.

mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgcp::bench::Case;

use crate::commands::SimOverrides;
use crate::error::{CliError, CliResult, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "mgcp", version, about = "Regularized multi-output Gaussian process transfer learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit on CSV datasets described by a JSON config and predict.
    Fit(FitArgs),
    /// Simulation case I: 1-D sources, two of them informative.
    #[command(name = "sim1")]
    Sim1(SimArgs),
    /// Simulation case II: a source on a lower-dimensional input domain.
    #[command(name = "sim2")]
    Sim2(SimArgs),
    /// Simulation case III, setting 1: many 1-D sources.
    #[command(name = "sim3-s1")]
    Sim3S1(SimArgs),
    /// Simulation case III, setting 2: 5-D inputs.
    #[command(name = "sim3-s2")]
    Sim3S2(SimArgs),
    /// Cross-validate the penalty weight over a grid.
    #[command(name = "sweep-gamma")]
    SweepGamma(SweepArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimArgs {
    /// JSON with optional `scenario` and `bench` sections, or a manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds both data generation and fitting.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    /// Comma-separated method names, e.g. `MGCP-R,GCP`.
    #[arg(long)]
    methods: Option<String>,
    /// Sources per function family (case III).
    #[arg(long)]
    ne: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated penalty weights; replaces `train.gamma_grid`.
    #[arg(long)]
    grid: Option<String>,
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("MGCP_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| CliError::Config(format!("MGCP_THREADS: `{value}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("MGCP_THREADS: {e}")))
}

fn run_sim(case: Case, args: SimArgs) -> CliResult<()> {
    let out = args.out.unwrap_or_else(|| commands::default_out(case.name()));
    let overrides = SimOverrides {
        seed: args.seed,
        replications: args.replications,
        methods: args.methods,
        ne: args.ne,
    };
    commands::sim_command(case, args.config.as_deref(), &out, &overrides)
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Fit(a) => {
            let out = a.out.unwrap_or_else(|| commands::default_out("fit"));
            commands::fit_command(&a.config, &out, a.seed)
        }
        Command::Sim1(a) => run_sim(Case::Sim1, a),
        Command::Sim2(a) => run_sim(Case::Sim2, a),
        Command::Sim3S1(a) => run_sim(Case::Sim3Setting1, a),
        Command::Sim3S2(a) => run_sim(Case::Sim3Setting2, a),
        Command::SweepGamma(a) => {
            let out = a.out.unwrap_or_else(|| commands::default_out("sweep-gamma"));
            commands::sweep_command(&a.config, &out, a.seed, a.grid.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mgcp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
