use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use supercm_cli::config::{parse_seeds, DataSource, ExperimentConfig};
use supercm_cli::plot::{curve_svg, read_scatter_csv, scatter_svg, write_svg, Metric, ScatterPoint};
use supercm_cli::record::{append_jsonl, read_jsonl};
use supercm_cli::runner::{prepare_data, record_path, train};
use supercm_cli::sweep::{sweep, workers_from_env, Grid};
use supercm_core::data::{read_csv, write_csv, Dataset};
use supercm_core::eval::{pca_project, SeedSummary};
use supercm_core::uda::proxy_a_distance;
use supercm_core::Tensor;

#[derive(Parser)]
#[command(name = "supercm", version, about = "SuperCM desk-scale experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed list: `a..b`, `a,b,c` or one seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` config override; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut cfg = cfg.with_overrides(&self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        } else if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic datasets of a config as CSV files.
    GenData(Common),
    /// Train every configured seed and append records to `<out>/records.jsonl`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write PCA-projected test features per seed for scatter plots.
        #[arg(long)]
        features: bool,
    },
    /// Run a Cartesian grid of overrides over the configured seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2,..` (`;` separates values of list-valued keys); repeatable.
        #[arg(long, value_name = "KEY=VALUES")]
        grid: Vec<String>,
        /// `key=value` pairs selecting the baseline cell; repeatable.
        #[arg(long, value_name = "KEY=VALUE")]
        baseline: Vec<String>,
    },
    /// Proxy-A distance between two CSV feature files.
    Pad {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render records (curves) or projected features (scatter) as SVG.
    Plot {
        /// JSONL records for a curve plot.
        #[arg(long, conflicts_with = "scatter")]
        records: Option<PathBuf>,
        /// `x,y,class[,domain]` CSV for a scatter plot.
        #[arg(long)]
        scatter: Option<PathBuf>,
        /// Curve metric: val_acc, total, ce, cm, base.
        #[arg(long, default_value = "val_acc")]
        metric: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise records per config hash.
    Report {
        #[arg(long)]
        records: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(c) => gen_data(&c.config()?),
        Cmd::Train { common, features } => train_cmd(&common.config()?, features),
        Cmd::Sweep { common, grid, baseline } => sweep_cmd(&common.config()?, &grid, &baseline),
        Cmd::Pad { source, target, seed } => {
            let s = read_csv(&source, None)?;
            let t = read_csv(&target, None)?;
            let r = proxy_a_distance(&s.x, &t.x, seed)?;
            println!("pad={} probe_error={}", r.pad, r.error);
            Ok(())
        }
        Cmd::Plot { records, scatter, metric, out } => {
            let svg = match (records, scatter) {
                (Some(r), None) => curve_svg(&read_jsonl(r)?, metric.parse::<Metric>()?)?,
                (None, Some(s)) => {
                    let text = std::fs::read_to_string(&s).with_context(|| format!("reading {}", s.display()))?;
                    let title = s.file_stem().map_or("features".into(), |n| n.to_string_lossy().into_owned());
                    scatter_svg(&read_scatter_csv(&text)?, &title)?
                }
                _ => bail!("give exactly one of --records or --scatter"),
            };
            write_svg(&out, &svg)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Report { records } => report(&records),
    }
}

fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.data.source == DataSource::Idx {
        bail!("gen-data writes synthetic data only");
    }
    cfg.validate()?;
    for &seed in &cfg.seeds {
        let p = prepare_data(cfg, seed)?;
        let dir = cfg.output_dir.join("data").join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir)?;
        write_csv(&p.train, dir.join("train.csv"))?;
        write_csv(&p.test, dir.join("test.csv"))?;
        if let Some(t) = &p.target {
            write_csv(t, dir.join("target.csv"))?;
        }
        if let Some(s) = &p.source_test {
            write_csv(s, dir.join("source_test.csv"))?;
        }
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn train_cmd(cfg: &ExperimentConfig, features: bool) -> Result<()> {
    let all = cfg.output_dir.join("records.jsonl");
    let mut accs = Vec::new();
    for &seed in &cfg.seeds {
        let o = train(cfg, seed).with_context(|| format!("seed {seed}"))?;
        let per_run = record_path(cfg, seed);
        if per_run.exists() {
            std::fs::remove_file(&per_run)?;
        }
        append_jsonl(&per_run, std::slice::from_ref(&o.record))?;
        append_jsonl(&all, std::slice::from_ref(&o.record))?;
        println!(
            "config={} seed={seed} test_acc={:.4} swa_test_acc={:.4} best_val={:.4}@{}{} ({:.1}s)",
            o.record.config_hash,
            o.record.test_acc,
            o.record.swa_test_acc,
            o.record.best_val_acc,
            o.record.best_step,
            o.record.pad.map_or(String::new(), |p| format!(" pad={p:.4}")),
            o.record.wall_clock_secs
        );
        accs.push(o.record.test_acc);
        if features {
            let path = cfg.output_dir.join("features").join(format!("{}-seed-{seed}.csv", o.record.config_hash));
            write_projection(&o, &path)?;
            println!("wrote {}", path.display());
        }
    }
    if accs.len() > 1 {
        let s = SeedSummary::from_values(&accs)?;
        println!("test_acc mean={:.4} std={:.4} over {} seeds", s.mean, s.std, s.n);
    }
    Ok(())
}

fn write_projection(o: &supercm_cli::TrainOutcome, path: &std::path::Path) -> Result<()> {
    let mut sets: Vec<(&Dataset, u8)> = Vec::new();
    if let Some(src) = &o.data.source_test {
        sets.push((src, 0));
        sets.push((&o.data.test, 1));
    } else {
        sets.push((&o.data.test, 0));
    }
    let mut feats = Vec::new();
    let mut meta = Vec::new();
    for (ds, dom) in sets {
        let f = o.network.features(&o.best, &ds.x)?;
        feats.push(f);
        meta.extend(ds.labels()?.iter().map(|&c| (c, dom)));
    }
    let refs: Vec<&Tensor> = feats.iter().collect();
    let pca = pca_project(&Tensor::vstack(&refs)?, 2)?;
    let points: Vec<ScatterPoint> = meta
        .iter()
        .enumerate()
        .map(|(i, &(class, domain))| ScatterPoint {
            x: pca.projection.get(i, 0),
            y: pca.projection.get(i, 1),
            class,
            domain,
        })
        .collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut s = String::from("x,y,class,domain\n");
    for p in points {
        s.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.class, p.domain));
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn sweep_cmd(cfg: &ExperimentConfig, grid: &[String], baseline: &[String]) -> Result<()> {
    let grid = Grid::parse(grid)?;
    let base: Vec<(String, String)> = baseline
        .iter()
        .map(|b| {
            b.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .with_context(|| format!("baseline `{b}` is not key=value"))
        })
        .collect::<Result<_>>()?;
    let summary = sweep(cfg, &grid, &cfg.seeds, (!base.is_empty()).then_some(&base[..]), workers_from_env())?;
    let dir = cfg.output_dir.join("sweep");
    summary.write(&dir)?;
    print!("{}", summary.to_csv());
    println!("wrote {}", dir.display());
    Ok(())
}

fn report(path: &PathBuf) -> Result<()> {
    let records = read_jsonl(path)?;
    let mut groups: BTreeMap<&str, Vec<&supercm_cli::RunRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry(&r.config_hash).or_default().push(r);
    }
    println!("config_hash,task,n,test_mean,test_std,swa_mean,pad_mean");
    for (hash, rs) in groups {
        let t = SeedSummary::from_values(&rs.iter().map(|r| r.test_acc).collect::<Vec<_>>())?;
        let swa = SeedSummary::from_values(&rs.iter().map(|r| r.swa_test_acc).collect::<Vec<_>>())?;
        let pads: Vec<f64> = rs.iter().filter_map(|r| r.pad).collect();
        let pad = SeedSummary::from_values(&pads).map_or(String::new(), |s| format!("{:.4}", s.mean));
        println!("{hash},{},{},{:.4},{:.4},{:.4},{pad}", rs[0].task, t.n, t.mean, t.std, swa.mean);
    }
    Ok(())
}
