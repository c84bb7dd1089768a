//! Library half of the `era` binary: argument types, the verbs, run logs,
//! evaluation reports and ablation sweeps. The binary only parses arguments
//! and maps errors to exit codes.

pub mod ablate;
pub mod args;
pub mod commands;
pub mod log;
pub mod report;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use era_core::config::RunConfig;

pub use args::{Cli, Command};

/// Exit status for a failed command: 2 when the root cause is an I/O
/// failure, 1 for everything else (validation, malformed input, failed
/// checks).
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|c| {
        c.is::<std::io::Error>() || matches!(c.downcast_ref::<era_core::Error>(), Some(era_core::Error::Io(_)))
    });
    if io {
        2
    } else {
        1
    }
}

/// Reads a TOML run configuration. Defaults fill every missing field.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.to_string().trim_end()))?;
    Ok(cfg)
}

/// Loads the config and applies the shared command-line overrides, then
/// validates the result.
pub fn resolve_config(args: &args::ConfigArgs) -> Result<RunConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Eval(a) => commands::eval(&a).map(|_| ()),
        Command::Gradcheck(a) => commands::gradcheck(&a).map(|_| ()),
        Command::Ablate(a) => commands::ablate(&a).map(|_| ()),
        Command::ExportData(a) => commands::export_data(&a).map(|_| ()),
    }
}
