//! Command-line plumbing: configuration, single runs, sweeps and the
//! stability table.

pub mod config;
pub mod run;
pub mod sweep;

use std::path::Path;

use crate::error::Error;
use crate::record::EngineKind;

pub use config::{parse_config, ConfigError, ConfigErrors, ExperimentConfig};
pub use run::{execute, write_outputs, RunOutput, Summary};
pub use sweep::{run_sweep, stability_table, SweepRow};

/// Environment variable holding the worker count.
pub const WORKERS_VAR: &str = "CHEMOTAXIS_WORKERS";

/// Worker count from the environment, default 1.
pub fn workers_from_env() -> Result<usize, HarnessError> {
    match std::env::var(WORKERS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(HarnessError::Config(ConfigErrors::Validation(vec![ConfigError {
                line: None,
                key: WORKERS_VAR.into(),
                message: format!("expected a positive integer, got {v:?}"),
            }]))),
        },
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(ConfigErrors),
    #[error("{0}")]
    Engine(#[from] Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// 1 for invalid input, 3 for a blow-up, 2 for any other failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Engine(e) => match e {
                Error::InvalidParams(_)
                | Error::InvalidDimensional { .. }
                | Error::CflViolation { .. }
                | Error::ProbabilityOverflow { .. }
                | Error::GridMismatch(_)
                | Error::Config(_) => 1,
                Error::FieldBlowup { .. } => 3,
                _ => 2,
            },
            HarnessError::Io(_) => 2,
        }
    }
}

/// What a subcommand should do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run(EngineKind),
    Sweep,
    Stability,
}

/// Parse the config and execute `command`, writing into `out`.
pub fn dispatch(
    command: Command,
    text: &str,
    overrides: &[String],
    out: Option<&Path>,
) -> Result<String, HarnessError> {
    let workers = workers_from_env()?;
    let mut table = config::parse_table(text, overrides).map_err(HarnessError::Config)?;
    if command == Command::Stability && !table.contains_key("engine") {
        // the dispersion relation belongs to the Keller-Segel limit
        table.insert("engine".into(), toml::Value::String("ks".into()));
    }
    let engine = match command {
        Command::Run(e) => Some(e),
        _ => None,
    };
    let cfg = config::resolve(text, table.clone(), engine).map_err(HarnessError::Config)?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.outputs.dir.as_ref().map(Into::into))
        .ok_or_else(|| {
            HarnessError::Config(ConfigErrors::Validation(vec![ConfigError {
                line: None,
                key: "outputs.dir".into(),
                message: "no output directory (use --out)".into(),
            }]))
        })?;
    match command {
        Command::Run(_) => {
            let output = execute(&cfg, workers)?;
            write_outputs(&cfg, &output, &dir)?;
            let mut text = String::new();
            for (k, v) in output.summary.rows() {
                text.push_str(&format!("{k} = {v}\n"));
            }
            Ok(text)
        }
        Command::Sweep => {
            let sweep = cfg.sweep.clone().ok_or_else(|| {
                HarnessError::Config(ConfigErrors::Validation(vec![ConfigError {
                    line: None,
                    key: "sweep".into(),
                    message: "missing [[sweep.axis]] entries".into(),
                }]))
            })?;
            let rows = run_sweep(text, &table, &sweep, None, workers);
            sweep::write_sweep(&cfg, &sweep, &rows, &dir)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            Ok(format!("{} points, {} failed\n", rows.len(), failed))
        }
        Command::Stability => {
            let rows = stability_table(&cfg)?;
            sweep::write_stability(&cfg, &rows, &dir)?;
            Ok(format!("{} stability rows\n", rows.len()))
        }
    }
}
