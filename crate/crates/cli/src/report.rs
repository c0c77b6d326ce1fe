//! Run reports and their on-disk form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};

use crate::scenario::Target;

/// Plot-ready table with the time column first, or a free-form JSON document.
#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Table { columns: Vec<String>, rows: Vec<Vec<f64>> },
    Document(Value),
}

impl Artifact {
    pub fn csv(&self) -> Option<String> {
        let Artifact::Table { columns, rows } = self else {
            return None;
        };
        let mut s = columns.join(",");
        s.push('\n');
        for row in rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        Some(s)
    }

    fn json(&self) -> Value {
        match self {
            Artifact::Table { columns, rows } => json!({ "columns": columns, "rows": rows }),
            Artifact::Document(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub name: String,
    pub target: Target,
    pub seed: u64,
    /// Key scalars; serde_json maps keep keys sorted.
    pub results: Map<String, Value>,
    pub checks: BTreeMap<String, bool>,
    pub artifacts: BTreeMap<String, Artifact>,
    /// Kept out of the summary file so that reruns compare byte for byte.
    pub wall_time: Duration,
}

impl Report {
    pub fn new(name: &str, target: Target, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            target,
            seed,
            results: Map::new(),
            checks: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            wall_time: Duration::ZERO,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.values().all(|v| *v)
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|(_, v)| !**v).map(|(k, _)| k.as_str()).collect()
    }

    pub fn summary(&self) -> Value {
        json!({
            "name": self.name,
            "target": self.target.name(),
            "seed": self.seed,
            "results": Value::Object(self.results.clone()),
            "checks": self.checks,
            "passed": self.passed(),
        })
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary()).expect("summary serialises");
        s.push('\n');
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Writes `<name>.summary.json` plus one `<name>.<artifact>.<ext>` per artifact;
/// tables follow `format`, documents are always JSON.
pub fn emit_results(report: &Report, format: Format, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = Vec::new();
    let mut write = |file: String, body: String| -> Result<()> {
        let path = dir.join(file);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        manifest.push(path);
        Ok(())
    };
    write(format!("{}.summary.json", report.name), report.summary_json())?;
    for (key, art) in &report.artifacts {
        match (art, format) {
            (Artifact::Table { .. }, Format::Csv) => {
                write(format!("{}.{key}.csv", report.name), art.csv().unwrap())?;
            }
            _ => {
                let mut body = serde_json::to_string_pretty(&art.json())?;
                body.push('\n');
                write(format!("{}.{key}.json", report.name), body)?;
            }
        }
    }
    Ok(manifest)
}
