//! Experiment configuration. Every subcommand's flags map onto one variant,
//! and the whole config round-trips through JSON.

use std::path::PathBuf;

use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Optimize the coding parameters of a model JSON under a rate budget.
    Optimize(OptimizeArgs),
    /// Distortion-versus-rate sweep on synthetic correlated sources.
    SweepDistortion(SweepArgs),
    /// Quadratic federated training with a chosen aggregator.
    FlTrain(FlArgs),
    /// Built-in single-source checks, or a region report with `verify region`.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct OptimizeArgs {
    /// Model JSON (general or symmetric form).
    #[arg(long)]
    pub model: PathBuf,
    /// Per-device rates in bits/symbol, overriding the model's `budget`.
    #[arg(long, value_delimiter = ',')]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<Vec<f64>>,
    /// Use the grouped algorithm; needs a symmetric model.
    #[arg(long)]
    #[serde(default)]
    pub symmetric: bool,
    /// Target scale for symmetric models (default 1/M).
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    /// Source correlation; repeat or comma-separate for several values.
    #[arg(long = "rho", value_delimiter = ',', required = true)]
    pub rho: Vec<f64>,
    /// Per-device rates in bits/symbol.
    #[arg(long, value_delimiter = ',', required = true)]
    pub rates: Vec<f64>,
    #[arg(long = "M", default_value_t = 10)]
    #[serde(rename = "M")]
    pub m: usize,
    #[arg(long = "N", default_value_t = 1 << 17)]
    #[serde(rename = "N")]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Any of mbtc, qsgd, uniform.
    #[arg(long, value_delimiter = ',', default_value = "mbtc,qsgd,uniform")]
    pub schemes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FlArgs {
    #[arg(long, default_value_t = 8)]
    pub devices: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 32)]
    pub samples_per_device: usize,
    #[arg(long, default_value_t = 50)]
    pub rounds: usize,
    /// mbtc, qsgd:<levels>, uniform:<bits> or error-free.
    #[arg(long, default_value = "mbtc")]
    pub aggregator: String,
    /// Per-device MBTC rate in bits/symbol.
    #[arg(long, default_value_t = 2.0)]
    pub budget: f64,
    /// Ridge regularizer.
    #[arg(long, default_value_t = 0.1)]
    pub mu: f64,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[command(subcommand)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<VerifyTarget>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyTarget {
    /// Slack of every subset constraint at a given parameter vector.
    Region(RegionArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RegionArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Auxiliary-noise variances, one per device.
    #[arg(long, value_delimiter = ',', required = true)]
    pub q: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub command: Command,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn seed(&self) -> Option<u64> {
        match &self.command {
            Command::SweepDistortion(a) => Some(a.seed),
            Command::FlTrain(a) => Some(a.seed),
            _ => None,
        }
    }

    /// SHA-256 of the JSON form without the output location.
    pub fn hash(&self) -> String {
        let bare = ExperimentConfig {
            out: None,
            ..self.clone()
        };
        hex(&Sha256::digest(serde_json::to_vec(&bare).expect("config serializes")))
    }

    /// Accepts a bare config or a run's metadata sidecar.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("config") {
            Some(inner) if value.get("config_hash").is_some() => serde_json::from_value(inner.clone()),
            _ => serde_json::from_value(value),
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
