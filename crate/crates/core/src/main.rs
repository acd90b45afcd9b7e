use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chemotaxis::harness::{dispatch, Command, HarnessError};
use chemotaxis::record::EngineKind;

/// Chemotactic aggregation: Monte Carlo, Keller-Segel and asymptotic solvers.
///
/// Worker threads come from the CHEMOTAXIS_WORKERS environment variable.
/// Exit status: 0 success, 1 invalid input, 2 runtime failure, 3 blow-up.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Particle Monte Carlo run.
    Mc(Common),
    /// Keller-Segel limit run.
    Ks(Common),
    /// Large-adaptation-time phase-density run.
    Asymptotic(Common),
    /// Linear-stability table over [stability] alpha x stiffness.
    Stability(Common),
    /// Parameter sweep over [[sweep.axis]] entries.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set params.alpha=1.0 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides outputs.dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Mc(c) => (Command::Run(EngineKind::Mc), c),
        Sub::Ks(c) => (Command::Run(EngineKind::Ks), c),
        Sub::Asymptotic(c) => (Command::Run(EngineKind::Asymptotic), c),
        Sub::Stability(c) => (Command::Stability, c),
        Sub::Sweep(c) => (Command::Sweep, c),
    };
    let text = match std::fs::read_to_string(&common.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", common.config.display());
            return ExitCode::from(1);
        }
    };
    match dispatch(command, &text, &common.set, common.out.as_deref()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprint!("error: {e}");
            if !matches!(e, HarnessError::Config(_)) {
                eprintln!();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
