//! Per-run records persisted as JSON lines.
//!
//! Schema version 1. Field order within a line is fixed by the struct
//! declaration order below.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Loss terms at one logged step. `total == ce + beta·cm + delta·base`,
/// where `cm == e1 + e2 + e3 + e4` and `delta` is the step's effective weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    pub beta: f64,
    pub delta: f64,
    pub ce: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub e4: f64,
    pub cm: f64,
    pub base: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccPoint {
    pub step: u64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub task: String,
    pub losses: Vec<LossPoint>,
    pub val_curve: Vec<AccPoint>,
    pub best_val_acc: f64,
    pub best_step: u64,
    /// Test accuracy of the best-validation checkpoint.
    pub test_acc: f64,
    /// Test accuracy of the last iterate.
    pub final_test_acc: f64,
    pub swa_test_acc: f64,
    /// Proxy-A distance between source and target test features (uda only).
    pub pad: Option<f64>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// The JSON line with the wall-clock field zeroed.
    pub fn deterministic_line(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        Ok(serde_json::to_string(&r)?)
    }
}

pub fn append_jsonl(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).with_context(|| format!("writing {}", path.display()))?;
    }
    f.sync_all()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RunRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: malformed record", path.display(), i + 1))?;
        if r.schema_version != SCHEMA_VERSION {
            bail!("{}:{}: schema version {} (expected {SCHEMA_VERSION})", path.display(), i + 1, r.schema_version);
        }
        out.push(r);
    }
    Ok(out)
}
