//! `she`: simulate the stochastic heat equation on the torus, run Monte Carlo
//! probes and verify the deterministic kernel and integral inequalities.
//!
//! Exit status: 0 on success, 1 when a check or probe fails (or on an I/O
//! error), 2 on an invalid configuration, 3 on a numerical failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;
mod config;
mod exit;

#[derive(Debug, Parser)]
#[command(name = "she", version, about = "Stochastic heat equation on the torus [-1, 1]")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an ensemble and write one CSV per trajectory plus a JSONL manifest.
    Simulate(RunArgs),
    /// Run the deterministic inequality checks.
    Verify(VerifyArgs),
    /// Run the probes listed in a plan and print a verdict table.
    Probe(RunArgs),
    /// Evaluate the periodic heat kernel at one point.
    KernelEval(KernelEvalArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration (solver keys at top level, probes as [[probes]]).
    #[arg(short, long, value_name = "PATH")]
    config: PathBuf,
    /// Override a config key, e.g. `--set lambda=2` or `--set sigma.c=0.5`; the last one wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to `output_dir` in the config, then $SHE_OUTPUT_DIR, then ./she-out.
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(short, long)]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Target {
    /// Heat-kernel bounds against the frozen constants.
    Kernel,
    /// The gamma-function bound on the singular time integral.
    Inequalities,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(value_enum)]
    target: Target,
    /// Kernel constants fixture to check against (default: the bundled one).
    #[arg(long, value_name = "PATH")]
    fixture: Option<PathBuf>,
    /// Refit the kernel constants over the fixture grid, write them here, then verify.
    #[arg(long, value_name = "PATH")]
    write_fixture: Option<PathBuf>,
    /// Restrict the inequality lattice to this eps (a single tuple if alpha and beta are also given).
    #[arg(long)]
    eps: Option<f64>,
    /// Restrict the inequality lattice to this alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Restrict the inequality lattice to this beta.
    #[arg(long)]
    beta: Option<f64>,
    /// Output directory for the certificate; same defaults as for `simulate`.
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct KernelEvalArgs {
    /// Time t > 0.
    #[arg(short, long)]
    t: f64,
    /// First point, wrapped onto the torus.
    #[arg(short, long, allow_hyphen_values = true)]
    x: f64,
    /// Second point, wrapped onto the torus.
    #[arg(short, long, allow_hyphen_values = true)]
    y: f64,
    /// Image-sum truncation order (default: smallest certified order).
    #[arg(long)]
    order: Option<usize>,
    /// Absolute error budget for the image sum.
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a.config, &a.overrides, a.out.as_deref(), a.workers),
        Command::Probe(a) => commands::probe(&a.config, &a.overrides, a.out.as_deref(), a.workers),
        Command::Verify(a) => match a.target {
            Target::Kernel => commands::verify_kernel(a.fixture.as_deref(), a.write_fixture.as_deref(), a.out.as_deref()),
            Target::Inequalities => commands::verify_inequalities(a.eps, a.alpha, a.beta, a.out.as_deref()),
        },
        Command::KernelEval(a) => commands::kernel_eval(a.t, a.x, a.y, a.order, a.tol),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("she: {e}");
            e.exit_code()
        }
    }
}
