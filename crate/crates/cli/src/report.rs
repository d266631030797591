//! Run reports and artifact writing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use blockflow::Tensor;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliResult;

pub const SCHEMA_VERSION: u32 = 1;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    /// `"<="`, `">="` or `"=="`.
    pub relation: &'static str,
    pub threshold: f64,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            relation: "<=",
            threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= threshold,
            value,
            relation: ">=",
            threshold,
        }
    }

    /// A yes/no check, recorded as 1 or 0 against 1.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            passed: ok,
            value: if ok { 1.0 } else { 0.0 },
            relation: "==",
            threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub metrics: BTreeMap<String, Value>,
}

impl Report {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            version: VERSION.to_string(),
            seed,
            passed: true,
            checks: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn check(&mut self, c: Check) {
        self.passed &= c.passed;
        self.checks.push(c);
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) -> CliResult<()> {
        self.metrics
            .insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// Output directory owned by one command run.
#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let mut text = header.join(",");
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let path = self.record(name);
        fs::write(path, text)?;
        Ok(())
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) -> CliResult<()> {
        let path = self.record(name);
        t.save(path)?;
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let path = self.record(name);
        fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    /// Writes `summary.json` and `manifest.json` last.
    pub fn finish(mut self, report: &Report, config: &impl Serialize) -> CliResult<()> {
        self.json("summary.json", report)?;
        let manifest = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "command": report.command,
            "version": VERSION,
            "seed": report.seed,
            "config": config,
            "artifacts": self.written,
        });
        fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }
}

/// Shortest round-trip decimal form.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}
