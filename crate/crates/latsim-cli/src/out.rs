//! Output emission: deterministic CSV files, a JSON summary per run, and a
//! plain-text report. Floats are printed with the shortest round-trip
//! representation, so identical results are byte-identical on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

/// One embedded acceptance check evaluated by a command or recipe.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub expected: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, value: f64, expected: impl Into<String>) -> Self {
        Check { name: name.to_string(), passed, value, expected: expected.into() }
    }

    /// |value − target| ≤ tol.
    pub fn within(name: &str, value: f64, target: f64, tol: f64) -> Self {
        Check::new(
            name,
            (value - target).abs() <= tol,
            value,
            format!("{target} ± {tol}"),
        )
    }

    pub fn at_least(name: &str, value: f64, min: f64) -> Self {
        Check::new(name, value >= min, value, format!(">= {min}"))
    }

    pub fn at_most(name: &str, value: f64, max: f64) -> Self {
        Check::new(name, value <= max, value, format!("<= {max}"))
    }

    pub fn in_range(name: &str, value: f64, lo: f64, hi: f64) -> Self {
        Check::new(name, (lo..=hi).contains(&value), value, format!("[{lo}, {hi}]"))
    }
}

/// JSON summary written by every command.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub command: String,
    pub recipe: Option<String>,
    pub seed: u64,
    pub files: Vec<String>,
    pub checks: Vec<Check>,
    pub all_checks_passed: bool,
    pub data: serde_json::Value,
}

impl Summary {
    pub fn new(command: &str, recipe: Option<&str>, seed: u64) -> Self {
        Summary {
            schema_version: 1,
            command: command.to_string(),
            recipe: recipe.map(str::to_string),
            seed,
            files: Vec::new(),
            checks: Vec::new(),
            all_checks_passed: true,
            data: serde_json::Value::Null,
        }
    }

    pub fn push_check(&mut self, check: Check) {
        self.all_checks_passed &= check.passed;
        self.checks.push(check);
    }

    pub fn finish(mut self, dir: &Path, name: &str) -> anyhow::Result<Self> {
        self.all_checks_passed = self.checks.iter().all(|c| c.passed);
        let path = dir.join(format!("{name}_summary.json"));
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(&path, text + "\n")?;
        self.files.push(path.display().to_string());
        Ok(self)
    }
}

/// Shortest round-trip float formatting; NaN/inf get stable spellings.
pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{v}")
    }
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| anyhow::anyhow!("cannot create output directory {}: {e}", dir.display()))
}

/// Write one CSV file with a header row; returns the path written.
pub fn write_csv(
    dir: &Path,
    name: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> anyhow::Result<PathBuf> {
    let path = dir.join(name);
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(&path, text)?;
    Ok(path)
}

/// Plain-text report lines alongside the CSV/JSON outputs.
pub fn write_report(dir: &Path, name: &str, lines: &[String]) -> anyhow::Result<PathBuf> {
    let path = dir.join(format!("{name}_report.txt"));
    fs::write(&path, lines.join("\n") + "\n")?;
    Ok(path)
}
