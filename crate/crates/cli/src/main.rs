//! `mbtc`: optimizer, simulator and training-harness driver.
//!
//! Exit codes: 0 success, 1 i/o, 2 usage, 3 configuration, 4 numeric
//! failure or failed checks. Failures also print one JSON line to stderr.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use crate::config::{Command, ExperimentConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mbtc", version, about = "Rate-distortion optimization and aggregation experiments for correlated federated updates")]
#[command(arg_required_else_help = true, args_conflicts_with_subcommands = true)]
struct Cli {
    /// Output directory; defaults to $MBTC_OUT_DIR, then the working directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run a saved experiment config (or the metadata sidecar of a past run).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

fn error_line(kind: &str, code: u8, message: &str) {
    eprintln!("{}", json!({ "error": kind, "code": code, "message": message }));
}

fn load(cli: Cli) -> Result<ExperimentConfig, CliError> {
    let mut config = match (cli.config, cli.command) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(command)) => ExperimentConfig { command, out: None },
        (None, None) => return Err(CliError::Config("no subcommand or --config given".into())),
    };
    if cli.out.is_some() {
        config.out = cli.out;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let message: Vec<&str> = rendered
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            error_line("usage", 2, message.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match load(cli).and_then(|c| commands::run(&c)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_line(e.kind(), e.exit_code(), &e.to_string());
            ExitCode::from(e.exit_code())
        }
    }
}
