//! Cartesian-product sweeps over config keys, run in parallel workers.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use supercm_core::eval::{paired_t_test, SeedSummary};

use crate::config::ExperimentConfig;
use crate::record::{append_jsonl, RunRecord};
use crate::runner::run_experiment;

/// Environment variable holding the worker count for sweeps.
pub const WORKERS_ENV: &str = "SUPERCM_WORKERS";

/// Keys whose values are themselves comma-separated lists; their sweep
/// values are separated by `;` instead of `,`.
const LIST_KEYS: [&str; 4] = ["model.layers", "shift.translation", "uda.disc_hidden", "optim.step_milestones"];

/// Ordered grid of `key -> values`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grid(pub Vec<(String, Vec<String>)>);

impl Grid {
    /// Parses `key=v1,v2,..` entries (`;` separates values of list keys).
    pub fn parse<S: AsRef<str>>(entries: &[S]) -> Result<Self> {
        let mut out: Vec<(String, Vec<String>)> = Vec::new();
        for e in entries {
            let e = e.as_ref();
            let (k, v) = e.split_once('=').ok_or_else(|| anyhow!("grid entry `{e}` is not `key=values`"))?;
            let k = k.trim().to_string();
            if out.iter().any(|(key, _)| *key == k) {
                bail!("grid key `{k}` given twice");
            }
            let sep = if LIST_KEYS.contains(&k.as_str()) { ';' } else { ',' };
            let values: Vec<String> = v.split(sep).map(|s| s.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                bail!("grid key `{k}` has an empty value");
            }
            out.push((k, values));
        }
        Ok(Self(out))
    }

    /// Every combination of values, first key varying slowest. An empty grid
    /// yields a single empty cell.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells = vec![Vec::new()];
        for (k, values) in &self.0 {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((k.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub overrides: Vec<(String, String)>,
    pub config_hash: String,
    /// `None` when every seed finished; otherwise the first failure.
    pub failure: Option<String>,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub swa_mean: f64,
    /// Two-sided paired t-test p-value against the baseline cell.
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub keys: Vec<String>,
    pub rows: Vec<SummaryRow>,
    pub records: Vec<RunRecord>,
    pub baseline: usize,
}

fn overrides_to_strings(cell: &[(String, String)]) -> Vec<String> {
    cell.iter().map(|(k, v)| format!("{k}={v}")).collect()
}

pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every `(cell, seed)` pair and summarises test accuracy per cell.
/// `baseline` selects the reference cell for p-values (default: the first).
pub fn sweep(
    base: &ExperimentConfig,
    grid: &Grid,
    seeds: &[u64],
    baseline: Option<&[(String, String)]>,
    workers: usize,
) -> Result<SweepSummary> {
    if seeds.is_empty() {
        bail!("sweep needs at least one seed");
    }
    let cells = grid.cells();
    let configs: Vec<ExperimentConfig> = cells
        .iter()
        .map(|c| base.clone().with_overrides(&overrides_to_strings(c)))
        .collect::<Result<_>>()
        .context("applying sweep grid")?;
    let baseline = match baseline {
        None => 0,
        Some(b) => cells
            .iter()
            .position(|c| b.iter().all(|kv| c.contains(kv)))
            .ok_or_else(|| anyhow!("baseline cell {b:?} is not in the grid"))?,
    };
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    let results: Vec<(usize, u64, Result<RunRecord>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, s)| (c, s, run_experiment(&configs[c], s)))
            .collect()
    });

    let mut records = Vec::new();
    let mut per_cell: Vec<(Vec<RunRecord>, Option<String>)> = vec![(Vec::new(), None); cells.len()];
    for (c, s, r) in results {
        match r {
            Ok(rec) => {
                per_cell[c].0.push(rec.clone());
                records.push(rec);
            }
            Err(e) => {
                per_cell[c].1.get_or_insert_with(|| format!("seed {s}: {e:#}"));
            }
        }
    }
    let acc = |recs: &[RunRecord], seed: u64| recs.iter().find(|r| r.seed == seed).map(|r| r.test_acc);
    let mut rows = Vec::with_capacity(cells.len());
    for (c, (recs, failure)) in per_cell.iter().enumerate() {
        let a: Vec<f64> = recs.iter().map(|r| r.test_acc).collect();
        let swa: Vec<f64> = recs.iter().map(|r| r.swa_test_acc).collect();
        let (n, mean, std) = match SeedSummary::from_values(&a) {
            Ok(s) => (s.n, s.mean, s.std),
            Err(_) => (0, f64::NAN, f64::NAN),
        };
        let swa_mean = SeedSummary::from_values(&swa).map_or(f64::NAN, |s| s.mean);
        let p_value = if c == baseline {
            None
        } else {
            let base_recs = &per_cell[baseline].0;
            let (x, y): (Vec<f64>, Vec<f64>) = seeds
                .iter()
                .filter_map(|&s| Some((acc(recs, s)?, acc(base_recs, s)?)))
                .unzip();
            paired_t_test(&x, &y).ok().map(|t| t.p)
        };
        rows.push(SummaryRow {
            overrides: cells[c].clone(),
            config_hash: configs[c].hash(),
            failure: failure.clone(),
            n,
            mean,
            std,
            swa_mean,
            p_value,
        });
    }
    Ok(SweepSummary {
        keys: grid.0.iter().map(|(k, _)| k.clone()).collect(),
        rows,
        records,
        baseline,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SweepSummary {
    /// Columns: `cell`, one per grid key, `config_hash,status,n,mean,std,swa_mean,p_value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell");
        for k in &self.keys {
            s.push(',');
            s.push_str(&csv_field(k));
        }
        s.push_str(",config_hash,status,n,mean,std,swa_mean,p_value\n");
        for (i, r) in self.rows.iter().enumerate() {
            write!(s, "{i}").unwrap();
            for (_, v) in &r.overrides {
                write!(s, ",{}", csv_field(v)).unwrap();
            }
            let status = match &r.failure {
                None => "ok".to_string(),
                Some(msg) => csv_field(&format!("failed: {msg}")),
            };
            let p = match (i == self.baseline, r.p_value) {
                (true, _) => "baseline".to_string(),
                (false, Some(p)) => p.to_string(),
                (false, None) => String::new(),
            };
            writeln!(s, ",{},{status},{},{},{},{},{p}", r.config_hash, r.n, r.mean, r.std, r.swa_mean).unwrap();
        }
        s
    }

    /// Writes `records.jsonl` and `summary.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let rec = dir.join("records.jsonl");
        if rec.exists() {
            std::fs::remove_file(&rec)?;
        }
        let mut sorted = self.records.clone();
        sorted.sort_by(|a, b| (&a.config_hash, a.seed).cmp(&(&b.config_hash, b.seed)));
        append_jsonl(&rec, &sorted)?;
        std::fs::write(dir.join("summary.csv"), self.to_csv())?;
        Ok(())
    }
}
