//! Output directory, CSV tables and run manifests.

use crate::CliError;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Formats a double with 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let io = |e: csv::Error| CliError::Config(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// One subcommand invocation: collects artifacts and writes the manifest.
pub struct Run {
    pub out: PathBuf,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub config: Value,
    pub outputs: Vec<String>,
    pub summary: serde_json::Map<String, Value>,
    started: Instant,
}

impl Run {
    pub fn new(out: PathBuf, command: &str, seed: u64, threads: usize, config: Value) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
        Ok(Run {
            out,
            command: command.into(),
            seed,
            threads,
            config,
            outputs: Vec::new(),
            summary: serde_json::Map::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn table(&mut self, name: &str, table: &Table) -> Result<(), CliError> {
        table.write(&self.path(name))?;
        self.outputs.push(name.into());
        Ok(())
    }

    pub fn artifact(&mut self, name: &str) {
        self.outputs.push(name.into());
    }

    pub fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.summary.insert(key.into(), value.into());
    }

    /// Writes `<command>.manifest.json`; `error` marks a failed run.
    pub fn finish(&self, error: Option<&CliError>) -> Result<PathBuf, CliError> {
        let manifest = json!({
            "toolkit": "dynamo",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "threads": self.threads,
            "wall_time_s": self.started.elapsed().as_secs_f64(),
            "status": if error.is_some() { "failed" } else { "ok" },
            "error": error.map(|e| e.to_string()),
            "outputs": self.outputs,
            "summary": self.summary,
        });
        let name = format!("{}.manifest.json", self.command.replace(' ', "_"));
        let path = self.path(&name);
        let text = serde_json::to_string_pretty(&manifest).expect("plain json");
        std::fs::write(&path, text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
