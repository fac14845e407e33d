//! Flat `key = value` experiment configuration with dotted section keys.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Lists are comma-separated. Every key has a default, so an empty file is a
//! valid blobs SSL configuration. `task` is applied first because it selects
//! defaults for the loss weights (`ssl`: β=0.18, δ=0; `uda`: β=0.9, δ=1).
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `task` | `ssl` | `ssl` or `uda` |
//! | `data.source` | `blobs` | `blobs`, `two_moons`, `rings` or `idx` |
//! | `data.n` | 566 | synthetic training-pool size (labeled + unlabeled + validation) |
//! | `data.n_test` | 1000 | synthetic test-set size |
//! | `data.n_target` | 566 | synthetic target-pool size (uda) |
//! | `data.classes` | 3 | synthetic class count |
//! | `data.noise` | 0.1 | synthetic noise σ |
//! | `data.labels_per_class` | 3 | labels per class (ssl) |
//! | `data.val_fraction` | 0.1 | stratified validation fraction |
//! | `data.train_images`, `data.train_labels`, `data.test_images`, `data.test_labels` | empty | IDX paths (`idx`) |
//! | `data.image_side` | 28 | image side for shift augmentation |
//! | `data.shift_px` | 0 | random shift augmentation radius in pixels |
//! | `shift.rotation_deg` | 30 | target rotation (uda) |
//! | `shift.translation` | `1,0` | target translation (uda) |
//! | `shift.extra_noise` | 0 | extra target noise σ (uda) |
//! | `model.layers` | `2,32,32,16` | backbone layer sizes, input first |
//! | `model.dropout` | 0 | dropout rate |
//! | `model.input_noise` | 0 | train-mode input noise σ |
//! | `ssl.method` | `none` | `none`, `pi_model`, `mean_teacher`, `pseudo_label`, `vat`, `ict` |
//! | `ssl.pl_threshold`, `ssl.ema_decay`, `ssl.vat_eps`, `ssl.vat_xi`, `ssl.vat_iters`, `ssl.ict_beta_a` | 0.95, 0.99, 2, 1e-6, 1, 0.5 | method constants |
//! | `supercm.strategy` | `gs` | `gs`, `gs_pt` or `learned` |
//! | `supercm.conf_threshold` | 0.9 | pseudo-label confidence for `gs_pt` |
//! | `supercm.normalization` | `class_mean` | `class_mean` or `batch_size` centroid averaging |
//! | `loss.beta`, `loss.delta`, `loss.alpha` | task-dependent, 1 | loss weights |
//! | `uda.gamma_ramp` | 10 | ramp steepness for δ |
//! | `uda.ramp` | `true` | scale δ by the ramp |
//! | `uda.disc_hidden` | `32` | discriminator hidden sizes |
//! | `optim.kind` | `adam` | `adam` or `nesterov` |
//! | `optim.lr` | 0.003 | base learning rate |
//! | `optim.momentum` | 0.9 | Nesterov momentum |
//! | `optim.weight_decay` | 0 | L2 coefficient |
//! | `optim.schedule` | `constant` | `constant`, `step`, `cosine`, `poly` |
//! | `optim.step_factor`, `optim.step_milestones` | 0.1, `0.8` | step decay (milestones as fractions) |
//! | `optim.poly_a`, `optim.poly_b` | 10, 0.75 | polynomial decay |
//! | `train.iterations` | 2000 (20000 for `idx`) | optimizer steps |
//! | `train.batch_labeled`, `train.batch_unlabeled` | 32, 64 | batch sizes |
//! | `train.eval_every` | 100 | validation interval |
//! | `train.log_every` | 10 | loss-trace interval |
//! | `train.swa_fraction` | 0.25 | final fraction of training averaged by SWA |
//! | `seeds` | `0..10` | `a..b`, `a,b,c` or a single seed (not hashed) |
//! | `output_dir` | `runs` | output directory (not hashed) |

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, ensure, Context, Result};
use sha2::{Digest, Sha256};
use supercm_core::data::SyntheticKind;
use supercm_core::nn::{LrSchedule, MlpConfig, OptimizerKind};
use supercm_core::ssl::{SslKind, SslMethodConfig};
use supercm_core::supercm::{CentroidNormalization, CentroidStrategy, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Ssl,
    Uda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic(SyntheticKind),
    Idx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Step,
    Cosine,
    Poly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    Gs,
    GsPt,
    Learned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub n: usize,
    pub n_test: usize,
    pub n_target: usize,
    pub classes: usize,
    pub noise: f64,
    pub labels_per_class: usize,
    pub val_fraction: f64,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub image_side: usize,
    pub shift_px: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftConfig {
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub extra_noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UdaConfig {
    pub gamma_ramp: f64,
    pub ramp: bool,
    pub disc_hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: String,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub step_factor: f64,
    pub step_milestones: Vec<f64>,
    pub poly_a: f64,
    pub poly_b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: Option<u64>,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub eval_every: u64,
    pub log_every: u64,
    pub swa_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub data: DataConfig,
    pub shift: ShiftConfig,
    pub model: MlpConfig,
    pub ssl: SslMethodConfig,
    pub strategy: StrategyKind,
    pub conf_threshold: f64,
    pub normalization: CentroidNormalization,
    pub weights: LossWeights,
    pub uda: UdaConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_task(Task::Ssl)
    }
}

fn parse_val<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim().parse::<T>().map_err(|e| anyhow!("`{key}`: cannot parse `{v}`: {e}"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_val(key, s)).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// `a..b` (half-open), `a,b,c`, or a single seed.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let v = v.trim();
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse_val("seeds", a)?, parse_val("seeds", b)?);
        ensure!(a < b, "empty seed range `{v}`");
        return Ok((a..b).collect());
    }
    let seeds = parse_list("seeds", v)?;
    ensure!(!seeds.is_empty(), "no seeds given");
    Ok(seeds)
}

impl ExperimentConfig {
    pub fn for_task(task: Task) -> Self {
        let weights = match task {
            Task::Ssl => LossWeights::default(),
            Task::Uda => LossWeights {
                beta: 0.9,
                delta: 1.0,
                alpha: 1.0,
            },
        };
        let source = match task {
            Task::Ssl => SyntheticKind::Blobs,
            Task::Uda => SyntheticKind::TwoMoons,
        };
        Self {
            task,
            data: DataConfig {
                source: DataSource::Synthetic(source),
                n: 566,
                n_test: 1000,
                n_target: 566,
                classes: if task == Task::Uda { 2 } else { 3 },
                noise: 0.1,
                labels_per_class: 3,
                val_fraction: 0.1,
                train_images: PathBuf::new(),
                train_labels: PathBuf::new(),
                test_images: PathBuf::new(),
                test_labels: PathBuf::new(),
                image_side: 28,
                shift_px: 0,
            },
            shift: ShiftConfig {
                rotation_deg: 30.0,
                translation: vec![1.0, 0.0],
                extra_noise: 0.0,
            },
            model: MlpConfig::new(vec![2, 32, 32, 16]),
            ssl: SslMethodConfig::default(),
            strategy: StrategyKind::Gs,
            conf_threshold: 0.9,
            normalization: CentroidNormalization::ClassMean,
            weights,
            uda: UdaConfig {
                gamma_ramp: 10.0,
                ramp: true,
                disc_hidden: vec![32],
            },
            optim: OptimConfig {
                kind: "adam".into(),
                lr: 3e-3,
                momentum: 0.9,
                weight_decay: 0.0,
                schedule: ScheduleKind::Constant,
                step_factor: 0.1,
                step_milestones: vec![0.8],
                poly_a: 10.0,
                poly_b: 0.75,
            },
            train: TrainConfig {
                iterations: None,
                batch_labeled: 32,
                batch_unlabeled: 64,
                eval_every: 100,
                log_every: 10,
                swa_fraction: 0.25,
            },
            seeds: (0..10).collect(),
            output_dir: PathBuf::from("runs"),
        }
    }

    /// Parses config text; `task` is applied before every other key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{raw}`", ln + 1))?;
            pairs.push((ln + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut seen = BTreeMap::new();
        for (ln, k, _) in &pairs {
            if let Some(prev) = seen.insert(k.clone(), *ln) {
                bail!("line {ln}: key `{k}` already set on line {prev}");
            }
        }
        let task = match pairs.iter().find(|(_, k, _)| k == "task") {
            Some((_, _, v)) => parse_task(v)?,
            None => Task::Ssl,
        };
        let mut cfg = Self::for_task(task);
        for (ln, k, v) in &pairs {
            cfg.set(k, v).with_context(|| format!("line {ln}"))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Applies `key=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override `{o}` is not `key=value`"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(self)
    }

    /// Changes the task; task-dependent keys still at the old task's
    /// defaults take the new task's defaults.
    fn switch_task(&mut self, task: Task) {
        if task == self.task {
            return;
        }
        let (old, new) = (Self::for_task(self.task), Self::for_task(task));
        if self.weights.beta == old.weights.beta {
            self.weights.beta = new.weights.beta;
        }
        if self.weights.delta == old.weights.delta {
            self.weights.delta = new.weights.delta;
        }
        if self.data.source == old.data.source {
            self.data.source = new.data.source;
        }
        if self.data.classes == old.data.classes {
            self.data.classes = new.data.classes;
        }
        self.task = task;
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        match key {
            "task" => self.switch_task(parse_task(v)?),
            "data.source" => {
                d.source = match v {
                    "idx" => DataSource::Idx,
                    other => DataSource::Synthetic(other.parse().map_err(|e| anyhow!("`data.source`: {e}"))?),
                }
            }
            "data.n" => d.n = parse_val(key, v)?,
            "data.n_test" => d.n_test = parse_val(key, v)?,
            "data.n_target" => d.n_target = parse_val(key, v)?,
            "data.classes" => d.classes = parse_val(key, v)?,
            "data.noise" => d.noise = parse_val(key, v)?,
            "data.labels_per_class" => d.labels_per_class = parse_val(key, v)?,
            "data.val_fraction" => d.val_fraction = parse_val(key, v)?,
            "data.train_images" => d.train_images = PathBuf::from(v),
            "data.train_labels" => d.train_labels = PathBuf::from(v),
            "data.test_images" => d.test_images = PathBuf::from(v),
            "data.test_labels" => d.test_labels = PathBuf::from(v),
            "data.image_side" => d.image_side = parse_val(key, v)?,
            "data.shift_px" => d.shift_px = parse_val(key, v)?,
            "shift.rotation_deg" => self.shift.rotation_deg = parse_val(key, v)?,
            "shift.translation" => self.shift.translation = parse_list(key, v)?,
            "shift.extra_noise" => self.shift.extra_noise = parse_val(key, v)?,
            "model.layers" => self.model.layer_sizes = parse_list(key, v)?,
            "model.dropout" => self.model.dropout_rate = parse_val(key, v)?,
            "model.input_noise" => self.model.input_noise_sigma = parse_val(key, v)?,
            "ssl.method" => self.ssl.kind = v.parse::<SslKind>().map_err(|e| anyhow!("`ssl.method`: {e}"))?,
            "ssl.pl_threshold" => self.ssl.pl_threshold = parse_val(key, v)?,
            "ssl.ema_decay" => self.ssl.ema_decay = parse_val(key, v)?,
            "ssl.vat_eps" => self.ssl.vat_eps = parse_val(key, v)?,
            "ssl.vat_xi" => self.ssl.vat_xi = parse_val(key, v)?,
            "ssl.vat_iters" => self.ssl.vat_iters = parse_val(key, v)?,
            "ssl.ict_beta_a" => self.ssl.ict_beta_a = parse_val(key, v)?,
            "supercm.strategy" => {
                self.strategy = match v {
                    "gs" => StrategyKind::Gs,
                    "gs_pt" => StrategyKind::GsPt,
                    "learned" => StrategyKind::Learned,
                    other => bail!("`supercm.strategy`: unknown strategy `{other}`"),
                }
            }
            "supercm.conf_threshold" => self.conf_threshold = parse_val(key, v)?,
            "supercm.normalization" => {
                self.normalization = match v {
                    "class_mean" => CentroidNormalization::ClassMean,
                    "batch_size" => CentroidNormalization::BatchSize,
                    other => bail!("`supercm.normalization`: unknown mode `{other}`"),
                }
            }
            "loss.beta" => self.weights.beta = parse_val(key, v)?,
            "loss.delta" => self.weights.delta = parse_val(key, v)?,
            "loss.alpha" => self.weights.alpha = parse_val(key, v)?,
            "uda.gamma_ramp" => self.uda.gamma_ramp = parse_val(key, v)?,
            "uda.ramp" => self.uda.ramp = parse_val(key, v)?,
            "uda.disc_hidden" => self.uda.disc_hidden = parse_list(key, v)?,
            "optim.kind" => {
                ensure!(v == "adam" || v == "nesterov", "`optim.kind`: unknown optimizer `{v}`");
                self.optim.kind = v.to_string();
            }
            "optim.lr" => self.optim.lr = parse_val(key, v)?,
            "optim.momentum" => self.optim.momentum = parse_val(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_val(key, v)?,
            "optim.schedule" => {
                self.optim.schedule = match v {
                    "constant" => ScheduleKind::Constant,
                    "step" => ScheduleKind::Step,
                    "cosine" => ScheduleKind::Cosine,
                    "poly" => ScheduleKind::Poly,
                    other => bail!("`optim.schedule`: unknown schedule `{other}`"),
                }
            }
            "optim.step_factor" => self.optim.step_factor = parse_val(key, v)?,
            "optim.step_milestones" => self.optim.step_milestones = parse_list(key, v)?,
            "optim.poly_a" => self.optim.poly_a = parse_val(key, v)?,
            "optim.poly_b" => self.optim.poly_b = parse_val(key, v)?,
            "train.iterations" => self.train.iterations = Some(parse_val(key, v)?),
            "train.batch_labeled" => self.train.batch_labeled = parse_val(key, v)?,
            "train.batch_unlabeled" => self.train.batch_unlabeled = parse_val(key, v)?,
            "train.eval_every" => self.train.eval_every = parse_val(key, v)?,
            "train.log_every" => self.train.log_every = parse_val(key, v)?,
            "train.swa_fraction" => self.train.swa_fraction = parse_val(key, v)?,
            "seeds" => self.seeds = parse_seeds(v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    pub fn iterations(&self) -> u64 {
        self.train.iterations.unwrap_or(match self.data.source {
            DataSource::Idx => 20_000,
            DataSource::Synthetic(_) => 2_000,
        })
    }

    /// Every hashed key with its canonical value, sorted by key.
    pub fn canonical_pairs(&self) -> BTreeMap<&'static str, String> {
        let d = &self.data;
        let s = &self.ssl;
        let o = &self.optim;
        let t = &self.train;
        let path = |p: &PathBuf| p.display().to_string();
        BTreeMap::from([
            ("task", task_str(self.task).to_string()),
            (
                "data.source",
                match d.source {
                    DataSource::Idx => "idx".to_string(),
                    DataSource::Synthetic(k) => k.as_str().to_string(),
                },
            ),
            ("data.n", d.n.to_string()),
            ("data.n_test", d.n_test.to_string()),
            ("data.n_target", d.n_target.to_string()),
            ("data.classes", d.classes.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.labels_per_class", d.labels_per_class.to_string()),
            ("data.val_fraction", d.val_fraction.to_string()),
            ("data.train_images", path(&d.train_images)),
            ("data.train_labels", path(&d.train_labels)),
            ("data.test_images", path(&d.test_images)),
            ("data.test_labels", path(&d.test_labels)),
            ("data.image_side", d.image_side.to_string()),
            ("data.shift_px", d.shift_px.to_string()),
            ("shift.rotation_deg", self.shift.rotation_deg.to_string()),
            ("shift.translation", join(&self.shift.translation)),
            ("shift.extra_noise", self.shift.extra_noise.to_string()),
            ("model.layers", join(&self.model.layer_sizes)),
            ("model.dropout", self.model.dropout_rate.to_string()),
            ("model.input_noise", self.model.input_noise_sigma.to_string()),
            ("ssl.method", s.kind.as_str().to_string()),
            ("ssl.pl_threshold", s.pl_threshold.to_string()),
            ("ssl.ema_decay", s.ema_decay.to_string()),
            ("ssl.vat_eps", s.vat_eps.to_string()),
            ("ssl.vat_xi", s.vat_xi.to_string()),
            ("ssl.vat_iters", s.vat_iters.to_string()),
            ("ssl.ict_beta_a", s.ict_beta_a.to_string()),
            ("supercm.strategy", strategy_str(self.strategy).to_string()),
            ("supercm.conf_threshold", self.conf_threshold.to_string()),
            (
                "supercm.normalization",
                match self.normalization {
                    CentroidNormalization::ClassMean => "class_mean",
                    CentroidNormalization::BatchSize => "batch_size",
                }
                .to_string(),
            ),
            ("loss.beta", self.weights.beta.to_string()),
            ("loss.delta", self.weights.delta.to_string()),
            ("loss.alpha", self.weights.alpha.to_string()),
            ("uda.gamma_ramp", self.uda.gamma_ramp.to_string()),
            ("uda.ramp", self.uda.ramp.to_string()),
            ("uda.disc_hidden", join(&self.uda.disc_hidden)),
            ("optim.kind", o.kind.clone()),
            ("optim.lr", o.lr.to_string()),
            ("optim.momentum", o.momentum.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            (
                "optim.schedule",
                match o.schedule {
                    ScheduleKind::Constant => "constant",
                    ScheduleKind::Step => "step",
                    ScheduleKind::Cosine => "cosine",
                    ScheduleKind::Poly => "poly",
                }
                .to_string(),
            ),
            ("optim.step_factor", o.step_factor.to_string()),
            ("optim.step_milestones", join(&o.step_milestones)),
            ("optim.poly_a", o.poly_a.to_string()),
            ("optim.poly_b", o.poly_b.to_string()),
            ("train.iterations", self.iterations().to_string()),
            ("train.batch_labeled", t.batch_labeled.to_string()),
            ("train.batch_unlabeled", t.batch_unlabeled.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.swa_fraction", t.swa_fraction.to_string()),
        ])
    }

    /// Canonical text: sorted hashed keys, then `seeds` and `output_dir`.
    pub fn to_text(&self) -> String {
        let mut s: String = self.canonical_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        s.push_str(&format!("seeds = {}\n", join(&self.seeds)));
        s.push_str(&format!("output_dir = {}\n", self.output_dir.display()));
        s
    }

    /// SHA-256 of the canonical hashed keys; first 16 hex digits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical_pairs() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn schedule(&self) -> LrSchedule {
        let base = self.optim.lr;
        match self.optim.schedule {
            ScheduleKind::Constant => LrSchedule::StepDecay {
                base,
                factor: 1.0,
                milestones: Vec::new(),
            },
            ScheduleKind::Step => LrSchedule::StepDecay {
                base,
                factor: self.optim.step_factor,
                milestones: self.optim.step_milestones.clone(),
            },
            ScheduleKind::Cosine => LrSchedule::Cosine { base },
            ScheduleKind::Poly => LrSchedule::Polynomial {
                base,
                a: self.optim.poly_a,
                b: self.optim.poly_b,
            },
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optim.kind.as_str() {
            "nesterov" => OptimizerKind::nesterov(self.optim.momentum),
            _ => OptimizerKind::adam(),
        }
    }

    pub fn centroid_strategy(&self) -> CentroidStrategy {
        match self.strategy {
            StrategyKind::Gs => CentroidStrategy::Gs,
            StrategyKind::GsPt => CentroidStrategy::GsPt {
                conf_threshold: self.conf_threshold,
            },
            StrategyKind::Learned => CentroidStrategy::Learned,
        }
    }

    /// Checks value ranges, cross-key consistency and referenced files.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ssl.validate()?;
        self.weights.validate()?;
        self.centroid_strategy().validate()?;
        let d = &self.data;
        ensure!((0.0..1.0).contains(&d.val_fraction), "`data.val_fraction` must lie in [0, 1)");
        ensure!(self.train.batch_labeled >= 1, "`train.batch_labeled` must be at least 1");
        ensure!(self.train.eval_every >= 1 && self.train.log_every >= 1, "eval and log intervals must be positive");
        ensure!(self.iterations() >= 1, "`train.iterations` must be positive");
        ensure!((0.0..=1.0).contains(&self.train.swa_fraction), "`train.swa_fraction` must lie in [0, 1]");
        ensure!(self.optim.lr > 0.0 && self.optim.lr.is_finite(), "`optim.lr` must be positive");
        ensure!(self.uda.gamma_ramp >= 0.0, "`uda.gamma_ramp` must be non-negative");
        ensure!(!self.seeds.is_empty(), "no seeds configured");
        match d.source {
            DataSource::Idx => {
                for (k, p) in [
                    ("data.train_images", &d.train_images),
                    ("data.train_labels", &d.train_labels),
                    ("data.test_images", &d.test_images),
                    ("data.test_labels", &d.test_labels),
                ] {
                    ensure!(p.is_file(), "`{k}`: file `{}` does not exist", p.display());
                }
                ensure!(self.task == Task::Ssl, "IDX data supports the ssl task only");
            }
            DataSource::Synthetic(_) => {
                ensure!(self.model.input_dim() == 2, "synthetic data is 2-D but `model.layers` starts with {}", self.model.input_dim());
                ensure!(d.shift_px == 0, "`data.shift_px` applies to IDX images only");
            }
        }
        if self.task == Task::Uda {
            ensure!(
                self.shift.translation.is_empty() || self.shift.translation.len() == self.model.input_dim(),
                "`shift.translation` must have one entry per input dimension"
            );
        }
        Ok(())
    }
}

fn parse_task(v: &str) -> Result<Task> {
    match v.trim() {
        "ssl" => Ok(Task::Ssl),
        "uda" => Ok(Task::Uda),
        other => bail!("`task`: expected `ssl` or `uda`, got `{other}`"),
    }
}

pub fn task_str(t: Task) -> &'static str {
    match t {
        Task::Ssl => "ssl",
        Task::Uda => "uda",
    }
}

pub fn strategy_str(s: StrategyKind) -> &'static str {
    match s {
        StrategyKind::Gs => "gs",
        StrategyKind::GsPt => "gs_pt",
        StrategyKind::Learned => "learned",
    }
}
