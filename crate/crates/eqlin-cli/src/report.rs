use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use eqlin::PredictorTable;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

/// Everything a command computed, rendered either as text or as JSON.
///
/// Verdicts decide the exit code; details carry informational values.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub tolerances: BTreeMap<String, f64>,
    pub verdicts: BTreeMap<String, bool>,
    pub residuals: BTreeMap<String, f64>,
    pub details: Map<String, Value>,
    pub wall_time_ms: f64,
}

impl RunReport {
    pub fn new(command: &str) -> Self {
        RunReport {
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            tolerances: BTreeMap::new(),
            verdicts: BTreeMap::new(),
            residuals: BTreeMap::new(),
            details: Map::new(),
            wall_time_ms: 0.0,
        }
    }

    /// Reads an input file, recording its path and SHA-256 digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        self.inputs.push(InputRecord { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) });
        Ok(bytes)
    }

    pub fn load_model(&mut self, path: &Path) -> Result<PredictorTable> {
        let bytes = self.read_input(path)?;
        let text = std::str::from_utf8(&bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
        PredictorTable::from_json(text).with_context(|| format!("invalid model file {}", path.display()))
    }

    pub fn write_output(&mut self, path: &Path, contents: &[u8]) -> Result<()> {
        std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    pub fn tol(&mut self, name: &str, value: f64) {
        self.tolerances.insert(name.to_string(), value);
    }

    pub fn verdict(&mut self, name: &str, value: bool) {
        self.verdicts.insert(name.to_string(), value);
    }

    pub fn residual(&mut self, name: &str, value: f64) {
        self.residuals.insert(name.to_string(), value);
    }

    pub fn detail(&mut self, name: &str, value: impl Serialize) {
        self.details.insert(name.to_string(), serde_json::to_value(value).expect("report values serialize"));
    }

    /// 0 when every verdict holds, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.verdicts.values().all(|v| *v) {
            0
        } else {
            1
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command: {}", self.command);
        for input in &self.inputs {
            let _ = writeln!(out, "input: {} (sha256 {})", input.path, input.sha256);
        }
        for output in &self.outputs {
            let _ = writeln!(out, "output: {output}");
        }
        for (name, value) in &self.tolerances {
            let _ = writeln!(out, "tolerance {name} = {value:e}");
        }
        for (name, value) in &self.details {
            let _ = writeln!(out, "{name}: {}", compact(value));
        }
        for (name, value) in &self.residuals {
            let _ = writeln!(out, "residual {name} = {value:.3e}");
        }
        for (name, value) in &self.verdicts {
            let _ = writeln!(out, "verdict {name}: {}", if *value { "PASS" } else { "FAIL" });
        }
        let _ = writeln!(out, "wall time: {:.1} ms", self.wall_time_ms);
        out
    }
}

fn compact(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
