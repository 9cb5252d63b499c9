//! CSV results and metadata sidecars.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const OUT_DIR_ENV: &str = "MBTC_OUT_DIR";

/// `--out`, then the environment, then the working directory.
pub fn resolve_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub struct Table {
    pub units: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(units: &'static str, header: &[&str]) -> Self {
        Self {
            units,
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Header row plus data rows, RFC-4180 quoted.
    pub fn body(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub struct Sink {
    dir: PathBuf,
    command: &'static str,
}

impl Sink {
    pub fn new(dir: PathBuf, command: &'static str) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, command })
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    /// Writes `name`; the first line carries the timestamp and is the only
    /// line that varies between identical runs.
    pub fn csv(&self, name: &str, table: &Table) -> Result<PathBuf, CliError> {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let text = format!(
            "# mbtc {} {} generated_unix={stamp}\n# units: {}\n{}",
            env!("CARGO_PKG_VERSION"),
            self.command,
            table.units,
            table.body()?
        );
        self.write(name, &text)
    }

    pub fn json(&self, name: &str, value: &serde_json::Value) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
        self.write(name, &text)
    }

    pub fn sidecar(&self, config: &ExperimentConfig, extra: serde_json::Value) -> Result<PathBuf, CliError> {
        let meta = json!({
            "config": config,
            "config_hash": config.hash(),
            "seed": config.seed(),
            "version": env!("CARGO_PKG_VERSION"),
            "details": extra,
        });
        self.json(&format!("{}.meta.json", self.command), &meta)
    }
}
