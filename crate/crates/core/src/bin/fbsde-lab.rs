//! Command-line entry point: one subcommand per experiment kind, a TOML
//! configuration file, and flags that override the file's values.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 i/o error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fbsde_lab::config::{parse_config, ExperimentKind};
use fbsde_lab::runner::{resolve_out_dir, run_experiment};
use fbsde_lab::Error;

#[derive(Parser)]
#[command(
    name = "fbsde-lab",
    version,
    about = "Numerical laboratory for fully coupled forward-backward SDEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a decoupling field and simulate (X, Y, Z) paths through it.
    Solve(RunArgs),
    /// Build a decoupling field and export it with its Lipschitz profile.
    Field(RunArgs),
    /// Moment estimates over an initial-condition ladder plus a coupled
    /// stability estimate.
    LpVerify(RunArgs),
    /// Coupled difference estimates across several separations.
    Stability(RunArgs),
    /// The linear-quadratic control pipeline with certificate, optimality
    /// margins, pairing identity, and Riccati cross-check.
    Lq(RunArgs),
    /// Closed-form reference runs with backward-equation residuals.
    Oracle(RunArgs),
    /// Smallness-gate arithmetic for given constants.
    KpGate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured number of Monte Carlo paths.
    #[arg(long)]
    n_paths: Option<usize>,
    /// Overrides the configured number of time steps.
    #[arg(long)]
    n_steps: Option<usize>,
    /// Output directory (defaults to the config, then $FBSDE_LAB_OUT, then ".").
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn kind(&self) -> ExperimentKind {
        match self {
            Command::Solve(_) => ExperimentKind::Solve,
            Command::Field(_) => ExperimentKind::Field,
            Command::LpVerify(_) => ExperimentKind::LpVerify,
            Command::Stability(_) => ExperimentKind::Stability,
            Command::Lq(_) => ExperimentKind::Lq,
            Command::Oracle(_) => ExperimentKind::Oracle,
            Command::KpGate(_) => ExperimentKind::KpGate,
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Solve(args)
            | Command::Field(args)
            | Command::LpVerify(args)
            | Command::Stability(args)
            | Command::Lq(args)
            | Command::Oracle(args)
            | Command::KpGate(args) => args,
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let kind = cli.command.kind();
    let args = cli.command.args();
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Io {
        path: args.config.display().to_string(),
        source: e,
    })?;
    let mut config = parse_config(&text)?;
    // The subcommand and flags win over the file on conflict.
    config.kind = kind;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n_paths) = args.n_paths {
        config.monte_carlo.n_paths = n_paths;
    }
    if let Some(n_steps) = args.n_steps {
        config.grid.n_steps = n_steps;
    }
    config.validate()?;
    let out_dir = resolve_out_dir(args.out.clone(), &config);
    let report = run_experiment(&config, &out_dir)?;
    println!(
        "{}: wrote report.json and {} under {} in {:.2}s (seed {})",
        report.kind,
        report
            .files
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(", "),
        out_dir.display(),
        report.wall_clock_seconds,
        report.seed,
    );
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
