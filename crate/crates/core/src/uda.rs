//! Domain-adversarial alignment with gradient reversal, the ramp-up schedule
//! and the Proxy-A distance probe.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::adcore::{Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{affine, Mlp, MlpConfig, ParamSet, VarMap};
use crate::rng::StreamKey;

pub const DISC_PREFIX: &str = "disc";

/// `2 / (1 + exp(−γ·p)) − 1`, rising from 0 at `p = 0` towards 1.
pub fn delta_schedule(p: f64, gamma_ramp: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("progress {p} outside [0, 1]")));
    }
    Ok(2.0 / (1.0 + (-gamma_ramp * p).exp()) - 1.0)
}

/// Small MLP mapping features to a single domain logit (source 0, target 1).
#[derive(Clone, Debug)]
pub struct Discriminator {
    hidden: Option<Mlp>,
    in_dim: usize,
}

impl Discriminator {
    pub fn new(feature_dim: usize, hidden: &[usize]) -> Result<Self> {
        if feature_dim == 0 {
            return Err(invalid("discriminator needs a positive input width"));
        }
        let hidden = if hidden.is_empty() {
            None
        } else {
            let mut sizes = vec![feature_dim];
            sizes.extend_from_slice(hidden);
            Some(Mlp::new(MlpConfig::new(sizes), DISC_PREFIX)?)
        };
        Ok(Self { hidden, in_dim: feature_dim })
    }

    fn head_in(&self) -> usize {
        self.hidden.as_ref().map_or(self.in_dim, |m| m.config.feature_dim())
    }

    pub fn init(&self, key: StreamKey) -> ParamSet {
        let mut ps = self.hidden.as_ref().map(|m| m.init(key.child("hidden"))).unwrap_or_default();
        let a = (6.0 / self.head_in() as f64).sqrt() * 0.5;
        let mut rng = key.child("head").rng();
        let w = (0..self.head_in()).map(|_| rng.random_range(-a..a)).collect();
        ps.insert(format!("{DISC_PREFIX}.head.w"), Tensor::matrix(self.head_in(), 1, w).unwrap());
        ps.insert(format!("{DISC_PREFIX}.head.b"), Tensor::zeros(&[1]));
        ps
    }

    /// Domain logits, n×1.
    pub fn logits(&self, tape: &mut Tape, vars: &VarMap, f: Var) -> Result<Var> {
        let h = match &self.hidden {
            Some(m) => m.forward(tape, vars, f, crate::nn::Mode::Eval, StreamKey::root(0))?,
            None => {
                if tape.value(f).cols() != self.in_dim {
                    return Err(shape_err("discriminator", format!("features {:?}, expected width {}", tape.value(f).shape(), self.in_dim)));
                }
                f
            }
        };
        let w = vars.get(&format!("{DISC_PREFIX}.head.w"))?;
        let b = vars.get(&format!("{DISC_PREFIX}.head.b"))?;
        affine(tape, h, w, b)
    }
}

/// Binary cross-entropy of the discriminator on `f`, whose first `n_source`
/// rows are source (label 0) and the rest target (label 1).
pub fn domain_bce(tape: &mut Tape, disc: &Discriminator, vars: &VarMap, f: Var, n_source: usize) -> Result<Var> {
    let n = tape.value(f).rows();
    if n_source == 0 || n_source >= n {
        return Err(Error::Empty { op: "dann_domain_loss" });
    }
    let z = disc.logits(tape, vars, f)?;
    // [0, z] per row; a row softmax gives (1 − σ(z), σ(z)).
    let spread = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0]])?);
    let two = tape.matmul(z, spread)?;
    let p = tape.softmax_rows(two)?;
    let logp = tape.log_clamped(p, f64::MIN_POSITIVE);
    let mut onehot = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        onehot.set(i, usize::from(i >= n_source), 1.0);
    }
    let onehot = tape.constant(onehot);
    let picked = tape.mul(logp, onehot)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Discriminator BCE on source and target features joined through a
/// gradient-reversal node with scale `lambda`.
pub fn dann_domain_loss(
    tape: &mut Tape,
    f_s: Var,
    f_t: Var,
    disc: &Discriminator,
    vars: &VarMap,
    lambda: f64,
) -> Result<Var> {
    let (ns, nt) = (tape.value(f_s).rows(), tape.value(f_t).rows());
    if ns == 0 || nt == 0 {
        return Err(Error::Empty { op: "dann_domain_loss" });
    }
    let f = tape.concat_rows(&[f_s, f_t])?;
    let f = tape.grad_reverse(f, lambda);
    domain_bce(tape, disc, vars, f, ns)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PadResult {
    pub pad: f64,
    /// Probe test error after clamping to at most 0.5.
    pub error: f64,
}

/// `2 (1 − 2ε)` with `ε` clamped to `[0, 0.5]`.
pub fn pad_from_error(eps: f64) -> f64 {
    2.0 * (1.0 - 2.0 * eps.clamp(0.0, 0.5))
}

pub const PAD_MIN_SAMPLES: usize = 20;
const PROBE_MAX_STEPS: usize = 5000;
const PROBE_GRAD_TOL: f64 = 1e-6;
const PROBE_LR: f64 = 0.5;

fn total_cmp_rows(a: &Tensor, b: &Tensor) -> Ordering {
    a.shape()
        .cmp(b.shape())
        .then_with(|| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Proxy-A distance: a linear logistic probe separates the two feature sets
/// on a stratified half split and is scored on the other half.
///
/// The result does not depend on which set is called source.
pub fn proxy_a_distance(f_s: &Tensor, f_t: &Tensor, probe_seed: u64) -> Result<PadResult> {
    for f in [f_s, f_t] {
        if f.rows() < PAD_MIN_SAMPLES {
            return Err(invalid(format!("Proxy-A distance needs ≥ {PAD_MIN_SAMPLES} samples per domain, got {}", f.rows())));
        }
        if !f.is_finite() {
            return Err(Error::NonFinite { what: "PAD features".into() });
        }
    }
    if f_s.cols() != f_t.cols() {
        return Err(shape_err("proxy_a_distance", format!("{:?} vs {:?}", f_s.shape(), f_t.shape())));
    }
    let (a, b) = match total_cmp_rows(f_s, f_t) {
        Ordering::Greater => (f_t, f_s),
        _ => (f_s, f_t),
    };
    let key = StreamKey::root(probe_seed).child("pad");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, set) in [(0.0, a), (1.0, b)] {
        let mut idx: Vec<usize> = (0..set.rows()).collect();
        idx.shuffle(&mut key.child("split").index(set.rows() as u64).index(label as u64).rng());
        let half = set.rows() / 2;
        for (j, &i) in idx.iter().enumerate() {
            let item = (set.row(i), label);
            if j < half {
                train.push(item);
            } else {
                test.push(item);
            }
        }
    }
    let d = a.cols();
    let probe = LogisticProbe::fit(&train, d);
    let wrong = test.iter().filter(|(x, y)| (probe.score(x) > 0.0) != (*y > 0.5)).count();
    let error = (wrong as f64 / test.len() as f64).min(0.5);
    Ok(PadResult {
        pad: pad_from_error(error),
        error,
    })
}

struct LogisticProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl LogisticProbe {
    fn fit(train: &[(&[f64], f64)], d: usize) -> Self {
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for (x, _) in train {
            for (m, v) in mean.iter_mut().zip(*x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for (x, _) in train {
            for ((s, v), m) in var.iter_mut().zip(*x).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| if v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        let xs: Vec<Vec<f64>> = train
            .iter()
            .map(|(x, _)| x.iter().zip(&mean).zip(&inv_std).map(|((v, m), s)| (v - m) * s).collect())
            .collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut gw = vec![0.0; d];
        for _ in 0..PROBE_MAX_STEPS {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (x, (_, y)) in xs.iter().zip(train) {
                let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let r = sigmoid(z) - y;
                for (g, v) in gw.iter_mut().zip(x) {
                    *g += r * v / n;
                }
                gb += r / n;
            }
            let norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
            if norm < PROBE_GRAD_TOL {
                break;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= PROBE_LR * g;
            }
            b -= PROBE_LR * gb;
        }
        Self { mean, inv_std, w, b }
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.b
            + x.iter()
                .zip(&self.mean)
                .zip(&self.inv_std)
                .zip(&self.w)
                .map(|(((v, m), s), w)| (v - m) * s * w)
                .sum::<f64>()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{OptimizerKind, OptimizerState};
    use rand_distr::StandardNormal;

    fn randn(shape: &[usize], key: StreamKey) -> Tensor {
        let mut rng = key.rng();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn ramp_examples() {
        assert_eq!(delta_schedule(0.0, 10.0).unwrap(), 0.0);
        assert!((delta_schedule(1.0, 10.0).unwrap() - 0.9999092).abs() < 5e-8);
        assert!((delta_schedule(0.5, 10.0).unwrap() - 0.9866143).abs() < 5e-8);
        assert!(delta_schedule(1.2, 10.0).is_err());
        assert!(delta_schedule(-0.1, 10.0).is_err());
    }

    #[test]
    fn at_chance_discriminator_gives_ln2() {
        let disc = Discriminator::new(3, &[]).unwrap();
        let mut ps = disc.init(StreamKey::root(0));
        ps.insert("disc.head.w", Tensor::zeros(&[3, 1]));
        let mut tape = Tape::new();
        let vars = ps.register(&mut tape, |_| true);
        let fs = tape.constant(randn(&[8, 3], StreamKey::root(1)));
        let ft = tape.constant(randn(&[8, 3], StreamKey::root(2)));
        let l = dann_domain_loss(&mut tape, fs, ft, &disc, &vars, 1.0).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_blocks_feature_gradient() {
        let disc = Discriminator::new(3, &[4]).unwrap();
        let ps = disc.init(StreamKey::root(3));
        let mut tape = Tape::new();
        let vars = ps.register(&mut tape, |_| true);
        let fs = tape.leaf(randn(&[5, 3], StreamKey::root(4)));
        let ft = tape.leaf(randn(&[6, 3], StreamKey::root(5)));
        let l = dann_domain_loss(&mut tape, fs, ft, &disc, &vars, 0.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(fs).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get(ft).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get(vars.get("disc.head.w").unwrap()).unwrap().data().iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn empty_domain_batch_rejected() {
        let disc = Discriminator::new(2, &[]).unwrap();
        let ps = disc.init(StreamKey::root(0));
        let mut tape = Tape::new();
        let vars = ps.register(&mut tape, |_| true);
        let fs = tape.constant(Tensor::zeros(&[0, 2]));
        let ft = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(dann_domain_loss(&mut tape, fs, ft, &disc, &vars, 1.0).is_err());
    }

    #[test]
    fn reversed_gradient_is_negative_lambda_times_plain() {
        let disc = Discriminator::new(3, &[5]).unwrap();
        let ps = disc.init(StreamKey::root(6));
        let xs = randn(&[4, 3], StreamKey::root(7));
        let xt = randn(&[4, 3], StreamKey::root(8)).map(|v| v + 1.0);
        let lambda = 0.35;
        let grads = |reverse: bool| {
            let mut tape = Tape::new();
            let vars = ps.register(&mut tape, |_| false);
            let fs = tape.leaf(xs.clone());
            let ft = tape.leaf(xt.clone());
            let l = if reverse {
                dann_domain_loss(&mut tape, fs, ft, &disc, &vars, lambda).unwrap()
            } else {
                let f = tape.concat_rows(&[fs, ft]).unwrap();
                domain_bce(&mut tape, &disc, &vars, f, 4).unwrap()
            };
            let mut g = tape.backward(l).unwrap();
            (g.take(fs).unwrap(), g.take(ft).unwrap())
        };
        let (rs, rt) = grads(true);
        let (ps_, pt) = grads(false);
        assert!(ps_.data().iter().any(|v| v.abs() > 1e-6));
        for (r, p) in rs.data().iter().chain(rt.data()).zip(ps_.data().iter().chain(pt.data())) {
            assert!((r + lambda * p).abs() < 1e-15);
        }
        // The non-reversed graph agrees with finite differences.
        let graph = |tape: &mut Tape, v: &[Var]| {
            let vars = ps.register(tape, |_| false);
            let f = tape.concat_rows(&[v[0], v[1]])?;
            domain_bce(tape, &disc, &vars, f, 4)
        };
        let rep = crate::adcore::grad_check(graph, &[("fs", xs.clone()), ("ft", xt.clone())], 1e-6, 1e-5).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn trained_discriminator_on_separable_features_drives_bce_to_zero() {
        let disc = Discriminator::new(2, &[]).unwrap();
        let mut ps = disc.init(StreamKey::root(9));
        let xs = randn(&[20, 2], StreamKey::root(10)).map(|v| 0.3 * v - 3.0);
        let xt = randn(&[20, 2], StreamKey::root(11)).map(|v| 0.3 * v + 3.0);
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.0).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let mut tape = Tape::new();
            let vars = ps.register(&mut tape, |_| true);
            let fs = tape.constant(xs.clone());
            let ft = tape.constant(xt.clone());
            let l = dann_domain_loss(&mut tape, fs, ft, &disc, &vars, 1.0).unwrap();
            last = tape.value(l).item();
            let mut g = tape.backward(l).unwrap();
            opt.step(&mut ps, &vars.gradients(&mut g), 0.05).unwrap();
        }
        assert!(last < 1e-3, "bce {last}");
    }

    #[test]
    fn pad_extremes() {
        assert_eq!(pad_from_error(0.5), 0.0);
        assert_eq!(pad_from_error(0.0), 2.0);
        assert_eq!(pad_from_error(0.7), 0.0);
        let a = randn(&[60, 3], StreamKey::root(12));
        let b = randn(&[60, 3], StreamKey::root(13)).map(|v| v + 20.0);
        let r = proxy_a_distance(&a, &b, 1).unwrap();
        assert_eq!(r.pad, 2.0);
        assert!(proxy_a_distance(&a.select_rows(&(0..19).collect::<Vec<_>>()), &b, 1).is_err());
    }

    #[test]
    fn pad_near_zero_for_same_distribution() {
        let a = randn(&[400, 2], StreamKey::root(14));
        let b = randn(&[400, 2], StreamKey::root(15));
        let r = proxy_a_distance(&a, &b, 2).unwrap();
        assert!(r.pad < 0.4, "{r:?}");
    }

    #[test]
    fn pad_is_symmetric() {
        for seed in 0..5 {
            let a = randn(&[40, 3], StreamKey::root(100 + seed));
            let b = randn(&[55, 3], StreamKey::root(200 + seed)).map(|v| v + 0.7);
            assert_eq!(proxy_a_distance(&a, &b, seed).unwrap(), proxy_a_distance(&b, &a, seed).unwrap());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ramp_equals_tanh_and_is_monotone(p in 0.0f64..=1.0, q in 0.0f64..=1.0, g in 0.1f64..20.0) {
                let d = delta_schedule(p, g).unwrap();
                prop_assert!((d - (g * p / 2.0).tanh()).abs() < 1e-12);
                let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
                prop_assert!(delta_schedule(lo, g).unwrap() <= delta_schedule(hi, g).unwrap());
            }
        }
    }
}
