use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "nbg", version, about = "Action minimizers, geodesic rays and audits for the N-body problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the initial datum and write a columnar trajectory.
    Propagate(Common),
    /// Tabulate fixed-time and free-time action potentials.
    Potential(Common),
    /// Minimize the fixed-time action between two configurations.
    Minimize(Common),
    /// Propagate and classify the asymptotic motion.
    Classify(Common),
    /// Build a calibrating ray and certify it.
    Ray(Common),
    /// Evaluate Busemann-function limits at points.
    Busemann(Common),
    /// Run the consolidated audit.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Integrator tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, c) = match cli.command {
        Command::Propagate(c) => ("propagate", c),
        Command::Potential(c) => ("potential", c),
        Command::Minimize(c) => ("minimize", c),
        Command::Classify(c) => ("classify", c),
        Command::Ray(c) => ("ray", c),
        Command::Busemann(c) => ("busemann", c),
        Command::Verify(c) => ("verify", c),
    };
    if let Some(n) = c.jobs {
        if n == 0 {
            eprintln!("nbg: validation error: flag `--jobs`: must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("nbg: {e}");
            return ExitCode::from(1);
        }
    }
    match nbg::commands::run(name, &c.scenario, c.out, c.seed, c.tol) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nbg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
