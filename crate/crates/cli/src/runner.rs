//! The training loop: data preparation, per-step SuperCM objective,
//! validation-based model selection, SWA and evaluation.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use supercm_core::cm::{cm_forward, cm_gamma, cm_loss, CmLossBreakdown, CmParams, CmVars, M_NAME};
use supercm_core::data::{
    gen_synthetic, idx_from_bytes, make_source_split, make_ssl_split, next_batch_pools, shift_domain, shift_images,
    Dataset,
};
use supercm_core::eval::top1;
use supercm_core::nn::{Mlp, Mode, OptimizerState, ParamSet, VarMap, WeightAverager};
use supercm_core::ssl::{
    ict_loss, mean_teacher_consistency, pi_consistency, pseudo_label_loss, vat_loss, SslKind,
};
use supercm_core::supercm::{predict, supercm_total_loss, CentroidStrategy, CentroidTracker, LossWeights};
use supercm_core::uda::{dann_domain_loss, delta_schedule, proxy_a_distance, Discriminator};
use supercm_core::{StreamKey, Tape, Tensor, Var};

use crate::config::{task_str, DataSource, ExperimentConfig, Task};
use crate::record::{append_jsonl, AccPoint, LossPoint, RunRecord, SCHEMA_VERSION};

/// Datasets and index pools for one run.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// SSL training pool, or the UDA source pool.
    pub train: Dataset,
    /// UDA target pool; its labels are never read during training.
    pub target: Option<Dataset>,
    /// SSL test set, or the UDA target test set.
    pub test: Dataset,
    /// UDA source test set (for Proxy-A distance).
    pub source_test: Option<Dataset>,
    /// Labeled rows of `train`.
    pub labeled: Vec<usize>,
    /// Unlabeled rows of `train` (ssl) or of `target` (uda).
    pub unlabeled: Vec<usize>,
    /// Validation rows of `train`.
    pub val: Vec<usize>,
}

fn synth_seed(seed: u64, purpose: &str) -> u64 {
    StreamKey::root(seed).child("data").child(purpose).raw()
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let d = &cfg.data;
    let split_seed = synth_seed(seed, "split");
    match (d.source, cfg.task) {
        (DataSource::Idx, Task::Ssl) => {
            let read = |p: &PathBuf| std::fs::read(p).with_context(|| format!("reading {}", p.display()));
            let train = idx_from_bytes(&read(&d.train_images)?, &read(&d.train_labels)?, "train")?;
            let test = idx_from_bytes(&read(&d.test_images)?, &read(&d.test_labels)?, "test")?;
            let split = make_ssl_split(&train, d.labels_per_class, d.val_fraction, split_seed)?;
            Ok(Prepared {
                train,
                target: None,
                test,
                source_test: None,
                labeled: split.labeled,
                unlabeled: split.unlabeled,
                val: split.val,
            })
        }
        (DataSource::Idx, Task::Uda) => bail!("IDX data supports the ssl task only"),
        (DataSource::Synthetic(kind), task) => {
            let train = gen_synthetic(kind, d.n, d.classes, d.noise, synth_seed(seed, "train"))?;
            let test = gen_synthetic(kind, d.n_test, d.classes, d.noise, synth_seed(seed, "test"))?;
            if task == Task::Ssl {
                let split = make_ssl_split(&train, d.labels_per_class, d.val_fraction, split_seed)?;
                return Ok(Prepared {
                    train,
                    target: None,
                    test,
                    source_test: None,
                    labeled: split.labeled,
                    unlabeled: split.unlabeled,
                    val: split.val,
                });
            }
            let s = &cfg.shift;
            let shift = |ds: &Dataset, purpose: &str| {
                shift_domain(ds, s.rotation_deg, &s.translation, s.extra_noise, synth_seed(seed, purpose))
            };
            let target_raw = gen_synthetic(kind, d.n_target, d.classes, d.noise, synth_seed(seed, "target"))?;
            let target = shift(&target_raw, "target-shift")?;
            let target_test_raw = gen_synthetic(kind, d.n_test, d.classes, d.noise, synth_seed(seed, "target-test"))?;
            let target_test = shift(&target_test_raw, "target-test-shift")?;
            let split = make_source_split(&train, d.val_fraction, split_seed)?;
            Ok(Prepared {
                unlabeled: (0..target.len()).collect(),
                train,
                target: Some(target),
                test: target_test,
                source_test: Some(test),
                labeled: split.labeled,
                val: split.val,
            })
        }
    }
}

/// Backbone, clustering head and (uda) discriminator.
#[derive(Clone, Debug)]
pub struct Network {
    pub mlp: Mlp,
    pub k: usize,
    pub disc: Option<Discriminator>,
}

impl Network {
    pub fn new(cfg: &ExperimentConfig, k: usize) -> Result<Self> {
        let mlp = Mlp::new(cfg.model.clone(), "backbone")?;
        let disc = match cfg.task {
            Task::Uda => Some(Discriminator::new(cfg.model.feature_dim(), &cfg.uda.disc_hidden)?),
            Task::Ssl => None,
        };
        Ok(Self { mlp, k, disc })
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        let key = StreamKey::root(seed).child("init");
        let mut ps = self.mlp.init(key.child("backbone"));
        CmParams::init(self.k, self.mlp.config.feature_dim(), key.child("cm"))?.insert_into(&mut ps);
        if let Some(disc) = &self.disc {
            ps.extend(disc.init(key.child("disc")));
        }
        Ok(ps)
    }

    /// Eval-mode backbone features.
    pub fn features(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let f = self.mlp.forward(&mut tape, &vars, xv, Mode::Eval, StreamKey::root(0))?;
        Ok(tape.value(f).clone())
    }

    /// Eval-mode responsibilities.
    pub fn gamma(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let f = self.features(params, x)?;
        Ok(cm_gamma(&CmParams::from_params(params)?, &f)?)
    }

    pub fn accuracy(&self, params: &ParamSet, x: &Tensor, y: &[usize]) -> Result<f64> {
        Ok(top1(&predict(&self.gamma(params, x)?), y)?)
    }

    fn gamma_on_tape(&self, tape: &mut Tape, vars: &VarMap, x: Var, mode: Mode, key: StreamKey) -> Result<Var> {
        let f = self.mlp.forward(tape, vars, x, mode, key)?;
        Ok(cm_forward(tape, CmVars::from_map(vars)?, f)?.gamma)
    }
}

/// Parameters produced by a run alongside its record.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub network: Network,
    pub best: ParamSet,
    pub last: ParamSet,
    pub swa: ParamSet,
    pub data: Prepared,
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn describe(step: u64, ce: Option<f64>, cm: &CmLossBreakdown, base: f64) -> String {
    format!(
        "step {step}: ce={ce:?} e1={} e2={} e3={} e4={} base={base}",
        cm.e1, cm.e2, cm.e3, cm.e4
    )
}

/// Runs training without writing anything to disk.
pub fn train(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let data = prepare_data(cfg, seed)?;
    let k = data.train.k;
    let net = Network::new(cfg, k)?;
    let mut params = net.init(seed)?;
    let strategy = cfg.centroid_strategy();
    let learned = strategy.centroids_trainable();
    let mut tracker =
        CentroidTracker::new(params.require(M_NAME)?.clone())?.with_normalization(cfg.normalization);
    let mut opt = OptimizerState::new(cfg.optimizer_kind(), cfg.optim.weight_decay)?;
    let schedule = cfg.schedule();
    let iters = cfg.iterations();
    let ssl = cfg.ssl;
    let mut teacher = if cfg.task == Task::Ssl && ssl.kind.uses_teacher() {
        Some(WeightAverager::ema(ssl.ema_decay, &params)?)
    } else {
        None
    };
    let y_train = data.train.labels()?.to_vec();
    let (x_val, y_val) = data.train.gather(&data.val);
    let y_val = y_val.unwrap_or_default();
    let unl_src = data.target.as_ref().unwrap_or(&data.train);
    let swa_start = ((iters as f64) * (1.0 - cfg.train.swa_fraction)).floor() as u64;
    let mut swa = WeightAverager::swa();
    let mut best: Option<(f64, u64, ParamSet)> = None;
    let mut losses = Vec::new();
    let mut val_curve = Vec::new();
    let run_key = StreamKey::root(seed).child("train");

    for step in 0..iters {
        let lr = schedule.lr_at(step, iters)?;
        let (li, ui) = next_batch_pools(
            &data.labeled,
            &data.unlabeled,
            cfg.train.batch_labeled,
            cfg.train.batch_unlabeled,
            synth_seed(seed, "batches"),
            step,
        )?;
        let key = run_key.index(step);
        let mut x_l = data.train.x.select_rows(&li);
        let y_l: Vec<usize> = li.iter().map(|&i| y_train[i]).collect();
        let mut x_u = unl_src.x.select_rows(&ui);
        if cfg.data.shift_px > 0 {
            let side = cfg.data.image_side;
            x_l = shift_images(&x_l, side, cfg.data.shift_px, key.child("aug-l"))?;
            x_u = shift_images(&x_u, side, cfg.data.shift_px, key.child("aug-u"))?;
        }
        let has_u = !ui.is_empty();

        let mut tape = Tape::new();
        let mut vars = params.register(&mut tape, |name| learned || name != M_NAME);
        let xl = tape.constant(x_l);
        let f_l = net.mlp.forward(&mut tape, &vars, xl, Mode::Train, key.child("fwd-l"))?;
        let xu = tape.constant(x_u.clone());
        let f_u = if has_u {
            Some(net.mlp.forward(&mut tape, &vars, xu, Mode::Train, key.child("fwd-u"))?)
        } else {
            None
        };

        match strategy {
            CentroidStrategy::Gs => tracker.update(tape.value(f_l), &y_l)?,
            CentroidStrategy::GsPt { conf_threshold } => match f_u {
                Some(f_u) => {
                    let fu = tape.value(f_u).clone();
                    let g_u = cm_gamma(&CmParams::from_params(&params)?, &fu)?;
                    tracker.update_with_pseudo(tape.value(f_l), &y_l, &fu, &g_u, conf_threshold)?;
                }
                None => tracker.update(tape.value(f_l), &y_l)?,
            },
            CentroidStrategy::Learned => {}
        }
        if !learned {
            params.insert(M_NAME, tracker.mu().clone());
            let m = tape.constant(tracker.mu().clone());
            vars.insert(M_NAME, m);
        }
        let cm_vars = CmVars::from_map(&vars)?;

        let out_l = cm_forward(&mut tape, cm_vars, f_l)?;
        let f_all = match f_u {
            Some(f_u) => tape.concat_rows(&[f_l, f_u])?,
            None => f_l,
        };
        let out_all = cm_forward(&mut tape, cm_vars, f_all)?;
        let (terms, cm_bd) = cm_loss(&mut tape, f_all, &out_all, cm_vars.m, cfg.weights.alpha)
            .with_context(|| format!("clustering loss at step {step}"))?;

        let base = match (cfg.task, f_u) {
            (Task::Uda, Some(f_u)) => {
                let disc = net.disc.as_ref().ok_or_else(|| anyhow!("uda run without a discriminator"))?;
                dann_domain_loss(&mut tape, f_l, f_u, disc, &vars, 1.0)?
            }
            (Task::Uda, None) => bail!("uda needs a non-empty target batch"),
            (Task::Ssl, _) if ssl.kind == SslKind::None => zero(&mut tape),
            (Task::Ssl, None) => bail!("`ssl.method = {}` needs unlabeled batches", ssl.kind.as_str()),
            (Task::Ssl, Some(f_u)) => {
                let p_u = cm_forward(&mut tape, cm_vars, f_u)?.gamma;
                match ssl.kind {
                    SslKind::None => unreachable!(),
                    SslKind::PiModel => {
                        let x2 = if cfg.data.shift_px > 0 {
                            let side = cfg.data.image_side;
                            shift_images(&unl_src.x.select_rows(&ui), side, cfg.data.shift_px, key.child("aug-u2"))?
                        } else {
                            x_u.clone()
                        };
                        let x2 = tape.constant(x2);
                        let p2 = net.gamma_on_tape(&mut tape, &vars, x2, Mode::Train, key.child("fwd-u2"))?;
                        pi_consistency(&mut tape, p_u, p2)?
                    }
                    SslKind::MeanTeacher => {
                        let shadow = teacher.as_ref().and_then(WeightAverager::average).expect("teacher");
                        let tvars = shadow.register(&mut tape, |_| false);
                        let p_t = net.gamma_on_tape(&mut tape, &tvars, xu, Mode::Train, key.child("fwd-teacher"))?;
                        mean_teacher_consistency(&mut tape, p_u, p_t)?
                    }
                    SslKind::PseudoLabel => pseudo_label_loss(&mut tape, p_u, ssl.pl_threshold)?,
                    SslKind::Vat => {
                        let model = |t: &mut Tape, x: Var| net.gamma_on_tape(t, &vars, x, Mode::Eval, key).map_err(to_core);
                        let clean = model(&mut tape, xu)?;
                        let p_clean = tape.value(clean).clone();
                        vat_loss(&mut tape, &model, &x_u, &p_clean, ssl.vat_eps, ssl.vat_xi, ssl.vat_iters, key.child("vat"))?
                    }
                    SslKind::Ict => {
                        let shadow = teacher.as_ref().and_then(WeightAverager::average).expect("teacher");
                        let p_t = net.gamma(&shadow, &x_u)?;
                        let model = |t: &mut Tape, x: Var| net.gamma_on_tape(t, &vars, x, Mode::Eval, key).map_err(to_core);
                        ict_loss(&mut tape, &model, &x_u, &p_t, ssl.ict_beta_a, key.child("ict"))?
                    }
                }
            }
        };

        let delta = if cfg.task == Task::Uda && cfg.uda.ramp {
            cfg.weights.delta * delta_schedule(step as f64 / iters as f64, cfg.uda.gamma_ramp)?
        } else {
            cfg.weights.delta
        };
        let base_v = tape.value(base).item();
        if !cm_bd.total.is_finite() || !base_v.is_finite() {
            bail!("non-finite loss at {}", describe(step, None, &cm_bd, base_v));
        }
        let weights = LossWeights {
            delta,
            ..cfg.weights
        };
        let (total, bd) = supercm_total_loss(&mut tape, out_l.gamma, &y_l, terms.total, base, &weights)?;
        if !bd.total.is_finite() {
            bail!("non-finite loss at {} total={}", describe(step, Some(bd.ce), &cm_bd, base_v), bd.total);
        }
        let mut grads = tape.backward(total)?;
        let grads = vars.gradients(&mut grads);
        opt.step(&mut params, &grads, lr)
            .with_context(|| describe(step, Some(bd.ce), &cm_bd, base_v))?;
        if !learned {
            params.insert(M_NAME, tracker.mu().clone());
        }
        if let Some(t) = teacher.as_mut() {
            t.absorb(&params)?;
        }

        if step % cfg.train.log_every == 0 || step + 1 == iters {
            losses.push(LossPoint {
                step,
                lr,
                beta: weights.beta,
                delta,
                ce: bd.ce,
                e1: cm_bd.e1,
                e2: cm_bd.e2,
                e3: cm_bd.e3,
                e4: cm_bd.e4,
                cm: bd.cm,
                base: bd.base,
                total: bd.total,
            });
        }
        let done = step + 1;
        if done % cfg.train.eval_every == 0 || done == iters {
            let acc = net.accuracy(&params, &x_val, &y_val)?;
            val_curve.push(AccPoint { step: done, val_acc: acc });
            // Ties go to the later checkpoint; toy validation accuracy saturates early.
            if best.as_ref().is_none_or(|(b, _, _)| acc >= *b) {
                best = Some((acc, done, params.clone()));
            }
            if done > swa_start {
                swa.absorb(&params)?;
            }
        }
    }

    let (best_val_acc, best_step, best_params) = best.ok_or_else(|| anyhow!("no validation pass ran"))?;
    let swa_params = swa.average().unwrap_or_else(|| params.clone());
    let y_test = data.test.labels()?;
    let test_acc = net.accuracy(&best_params, &data.test.x, y_test)?;
    let final_test_acc = net.accuracy(&params, &data.test.x, y_test)?;
    let swa_test_acc = net.accuracy(&swa_params, &data.test.x, y_test)?;
    let pad = match &data.source_test {
        Some(src) => {
            let fs = net.features(&best_params, &src.x)?;
            let ft = net.features(&best_params, &data.test.x)?;
            Some(proxy_a_distance(&fs, &ft, synth_seed(seed, "pad"))?.pad)
        }
        None => None,
    };
    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed,
        task: task_str(cfg.task).to_string(),
        losses,
        val_curve,
        best_val_acc,
        best_step,
        test_acc,
        final_test_acc,
        swa_test_acc,
        pad,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        record,
        network: net,
        best: best_params,
        last: params,
        swa: swa_params,
        data,
    })
}

fn to_core(e: anyhow::Error) -> supercm_core::Error {
    match e.downcast::<supercm_core::Error>() {
        Ok(e) => e,
        Err(e) => supercm_core::Error::ContractViolation(e.to_string()),
    }
}

/// Where [`run_experiment`] writes the record of `(config, seed)`.
pub fn record_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join("runs").join(cfg.hash()).join(format!("seed-{seed}.jsonl"))
}

/// Trains one `(config, seed)` and writes its record, replacing any earlier
/// record for the same pair.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let outcome = train(cfg, seed)?;
    let path = record_path(cfg, seed);
    if path.exists() {
        std::fs::remove_file(&path).with_context(|| format!("replacing {}", path.display()))?;
    }
    append_jsonl(&path, std::slice::from_ref(&outcome.record))?;
    Ok(outcome.record)
}
