//! Base semi-supervised regularizers: Π-model, Mean Teacher, pseudo-labels,
//! virtual adversarial training and interpolation consistency.
//!
//! Models are passed as closures that map an input node to a row-stochastic
//! (or, for tests, arbitrary) output node on the same tape.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::adcore::{Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::StreamKey;

/// A differentiable model evaluated on the caller's tape.
pub type Model<'a> = dyn Fn(&mut Tape, Var) -> Result<Var> + 'a;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SslKind {
    #[default]
    None,
    PiModel,
    MeanTeacher,
    PseudoLabel,
    Vat,
    Ict,
}

impl FromStr for SslKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "pi_model" | "pi" => Self::PiModel,
            "mean_teacher" => Self::MeanTeacher,
            "pseudo_label" => Self::PseudoLabel,
            "vat" => Self::Vat,
            "ict" => Self::Ict,
            other => return Err(invalid(format!("unknown SSL method `{other}`"))),
        })
    }
}

impl SslKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::PiModel => "pi_model",
            Self::MeanTeacher => "mean_teacher",
            Self::PseudoLabel => "pseudo_label",
            Self::Vat => "vat",
            Self::Ict => "ict",
        }
    }

    /// Whether the method keeps an EMA teacher.
    pub fn uses_teacher(self) -> bool {
        matches!(self, Self::MeanTeacher | Self::Ict)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SslMethodConfig {
    pub kind: SslKind,
    pub pl_threshold: f64,
    pub ema_decay: f64,
    pub vat_eps: f64,
    pub vat_xi: f64,
    pub vat_iters: usize,
    pub ict_beta_a: f64,
}

impl Default for SslMethodConfig {
    fn default() -> Self {
        Self {
            kind: SslKind::None,
            pl_threshold: 0.95,
            ema_decay: 0.99,
            vat_eps: 2.0,
            vat_xi: 1e-6,
            vat_iters: 1,
            ict_beta_a: 0.5,
        }
    }
}

impl SslMethodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pl_threshold > 0.0 && self.pl_threshold <= 1.0) {
            return Err(invalid(format!("pseudo-label threshold {} outside (0, 1]", self.pl_threshold)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return Err(invalid(format!("EMA decay {} outside (0, 1]", self.ema_decay)));
        }
        if !(self.vat_eps >= 0.0 && self.vat_xi > 0.0 && self.vat_iters >= 1) {
            return Err(invalid("VAT needs eps ≥ 0, xi > 0 and at least one power iteration"));
        }
        if !(self.ict_beta_a > 0.0) {
            return Err(invalid("ICT Beta parameter must be positive"));
        }
        Ok(())
    }
}

/// `(1/(nK)) Σ (a − b)²`
fn mse(tape: &mut Tape, op: &'static str, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.shape() != bv.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
    }
    if av.is_empty() {
        return Err(Error::Empty { op });
    }
    let n = av.len() as f64;
    let d = tape.sub(a, b)?;
    let s = tape.sq_l2(d);
    Ok(tape.scale(s, 1.0 / n))
}

/// Mean squared difference between two stochastic passes.
pub fn pi_consistency(tape: &mut Tape, p1: Var, p2: Var) -> Result<Var> {
    mse(tape, "pi_consistency", p1, p2)
}

/// Mean squared difference against EMA-teacher predictions. The teacher node
/// must not carry gradient.
pub fn mean_teacher_consistency(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    if tape.requires_grad(teacher) {
        return Err(Error::ContractViolation(
            "teacher predictions are connected to trainable parameters".into(),
        ));
    }
    mse(tape, "mean_teacher_consistency", student, teacher)
}

/// Cross-entropy of confident rows against their own argmax, averaged over
/// the rows whose top probability reaches `threshold`.
pub fn pseudo_label_loss(tape: &mut Tape, p_u: Var, threshold: f64) -> Result<Var> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(invalid(format!("pseudo-label threshold {threshold} outside (0, 1]")));
    }
    let pv = tape.value(p_u);
    let (n, k) = (pv.rows(), pv.cols());
    let mut mask = Tensor::zeros(&[n, k]);
    let mut picked = 0usize;
    for (i, r) in pv.iter_rows().enumerate() {
        let (c, g) = r
            .iter()
            .enumerate()
            .fold((0, r[0]), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
        if g >= threshold {
            mask.set(i, c, 1.0);
            picked += 1;
        }
    }
    if picked == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mask = tape.constant(mask);
    let logp = tape.log_clamped(p_u, crate::supercm::CE_LOG_FLOOR);
    let sel = tape.mul(logp, mask)?;
    let s = tape.sum(sel);
    Ok(tape.scale(s, -1.0 / picked as f64))
}

/// `(1/n) Σ_i Σ_k p_ik (log p_ik − log q_ik)` with `p` fixed.
pub fn kl_rows(tape: &mut Tape, p: &Tensor, q: Var) -> Result<Var> {
    let qv = tape.value(q);
    if qv.shape() != p.shape() {
        return Err(shape_err("kl_rows", format!("{:?} vs {:?}", p.shape(), qv.shape())));
    }
    let n = p.rows();
    if n == 0 {
        return Err(Error::Empty { op: "kl_rows" });
    }
    // 0·log 0 = 0: zero-probability entries get weight 0 and a finite log.
    let logp = tape.constant(p.map(|v| if v > 0.0 { v.ln() } else { 0.0 }));
    let w = tape.constant(p.clone());
    let logq = tape.log_clamped(q, f64::MIN_POSITIVE);
    let diff = tape.sub(logp, logq)?;
    let terms = tape.mul(diff, w)?;
    let s = tape.sum(terms);
    Ok(tape.scale(s, 1.0 / n as f64))
}

fn normalize_rows(r: &mut Tensor) -> Vec<usize> {
    let mut zero = Vec::new();
    let cols = r.cols();
    for i in 0..r.rows() {
        let row = r.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            row.iter_mut().for_each(|v| *v /= norm);
        } else if cols > 0 {
            zero.push(i);
        }
    }
    zero
}

fn random_unit_rows(shape: &[usize], key: StreamKey) -> Tensor {
    let mut rng = key.rng();
    let n = shape.iter().product();
    let mut r = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    normalize_rows(&mut r);
    r
}

/// Adversarial direction by power iteration: per-row unit vectors that most
/// increase `KL(p_clean ‖ model(x + xi·r))`.
///
/// Rows whose gradient vanishes are re-drawn once at random and kept; a flat
/// model therefore yields a random direction and, later, a zero loss.
pub fn vat_direction(
    tape: &mut Tape,
    model: &Model,
    x_u: &Tensor,
    p_clean: &Tensor,
    xi: f64,
    iters: usize,
    key: StreamKey,
) -> Result<Tensor> {
    if !(xi > 0.0) || iters == 0 {
        return Err(invalid("VAT needs xi > 0 and at least one power iteration"));
    }
    let x = tape.constant(x_u.clone());
    let mut r = random_unit_rows(x_u.shape(), key.child("vat-init"));
    for it in 0..iters {
        let rv = tape.leaf(r.clone());
        let step = tape.scale(rv, xi);
        let xp = tape.add(x, step)?;
        let q = model(tape, xp)?;
        let kl = kl_rows(tape, p_clean, q)?;
        let g = tape.backward(kl)?.take(rv).expect("direction is a leaf");
        if !g.is_finite() {
            return Err(Error::NonFinite { what: "VAT power-iteration gradient".into() });
        }
        r = g;
        let zero = normalize_rows(&mut r);
        if !zero.is_empty() {
            let fresh = random_unit_rows(x_u.shape(), key.child("vat-redraw").index(it as u64));
            for i in zero {
                r.row_mut(i).copy_from_slice(fresh.row(i));
            }
        }
    }
    Ok(r)
}

/// `KL(p_clean ‖ model(x + eps·r))` averaged over the batch, with `r` from
/// [`vat_direction`]. Gradient flows only through the perturbed branch.
#[allow(clippy::too_many_arguments)]
pub fn vat_loss(
    tape: &mut Tape,
    model: &Model,
    x_u: &Tensor,
    p_clean: &Tensor,
    eps: f64,
    xi: f64,
    iters: usize,
    key: StreamKey,
) -> Result<Var> {
    if !(eps >= 0.0) {
        return Err(invalid("VAT radius must be non-negative"));
    }
    let r = vat_direction(tape, model, x_u, p_clean, xi, iters, key)?;
    let adv = x_u.zip_map(&r, |x, d| x + eps * d)?;
    let xa = tape.constant(adv);
    let q = model(tape, xa)?;
    kl_rows(tape, p_clean, q)
}

/// Interpolation consistency with an explicit mixing weight and pairing.
pub fn ict_loss_with(
    tape: &mut Tape,
    model: &Model,
    x_u: &Tensor,
    teacher_p: &Tensor,
    lambda: f64,
    perm: &[usize],
) -> Result<Var> {
    let n = x_u.rows();
    if n < 2 {
        return Err(invalid(format!("interpolation needs at least 2 rows, got {n}")));
    }
    if teacher_p.rows() != n || perm.len() != n || perm.iter().any(|&j| j >= n) {
        return Err(shape_err("ict_loss", format!("{n} inputs, {} targets, {} pairs", teacher_p.rows(), perm.len())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("mixing weight {lambda} outside [0, 1]")));
    }
    let mix = |t: &Tensor| -> Tensor {
        let other = t.select_rows(perm);
        t.zip_map(&other, |a, b| lambda * a + (1.0 - lambda) * b).unwrap()
    };
    let xm = tape.constant(mix(x_u));
    let target = tape.constant(mix(teacher_p));
    let pred = model(tape, xm)?;
    mse(tape, "ict_loss", pred, target)
}

/// Interpolation consistency with `λ ~ Beta(a, a)` and a random pairing.
pub fn ict_loss(
    tape: &mut Tape,
    model: &Model,
    x_u: &Tensor,
    teacher_p: &Tensor,
    beta_a: f64,
    key: StreamKey,
) -> Result<Var> {
    let beta = Beta::new(beta_a, beta_a).map_err(|e| invalid(format!("mixing distribution: {e}")))?;
    let lambda = beta.sample(&mut key.child("ict-lambda").rng());
    let mut perm: Vec<usize> = (0..x_u.rows()).collect();
    perm.shuffle(&mut key.child("ict-perm").rng());
    ict_loss_with(tape, model, x_u, teacher_p, lambda, &perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::softmax_rows;

    fn randn(shape: &[usize], key: StreamKey) -> Tensor {
        let mut rng = key.rng();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn pi_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let l = pi_consistency(&mut tape, a, b).unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-15);
        let l = pi_consistency(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let c = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(pi_consistency(&mut tape, a, c).is_err());
    }

    #[test]
    fn teacher_with_gradient_is_a_contract_violation() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::from_rows(&[vec![0.2, 0.8]]).unwrap());
        let t = tape.leaf(Tensor::from_rows(&[vec![0.4, 0.6]]).unwrap());
        assert!(matches!(
            mean_teacher_consistency(&mut tape, s, t),
            Err(Error::ContractViolation(_))
        ));
        let t = tape.constant(Tensor::from_rows(&[vec![0.4, 0.6]]).unwrap());
        let l = mean_teacher_consistency(&mut tape, s, t).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(s).unwrap().data().iter().all(|v| v.abs() > 0.0));
        let l = mean_teacher_consistency(&mut tape, t, t).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn pseudo_label_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.96, 0.04]]).unwrap());
        let l = pseudo_label_loss(&mut tape, p, 0.95).unwrap();
        assert!((tape.value(l).item() + 0.96f64.ln()).abs() < 1e-15);
        assert!((tape.value(l).item() - 0.0408).abs() < 5e-5);

        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let l = pseudo_label_loss(&mut tape, p, 0.95).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let p = tape.constant(Tensor::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap());
        let l = pseudo_label_loss(&mut tape, p, 0.95).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(pseudo_label_loss(&mut tape, p, 0.0).is_err());
    }

    #[test]
    fn pseudo_label_averages_over_qualifying_rows_only() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.96, 0.04], vec![0.5, 0.5], vec![0.02, 0.98]]).unwrap());
        let l = pseudo_label_loss(&mut tape, p, 0.95).unwrap();
        let expect = -(0.96f64.ln() + 0.98f64.ln()) / 2.0;
        assert!((tape.value(l).item() - expect).abs() < 1e-15);
    }

    fn linear_softmax(w: Tensor, b: Tensor) -> impl Fn(&mut Tape, Var) -> Result<Var> {
        move |tape: &mut Tape, x: Var| {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let z = tape.matmul(x, wv)?;
            let z = tape.add(z, bv)?;
            tape.softmax_rows(z)
        }
    }

    fn eval(model: &Model, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = model(&mut tape, xv).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn vat_flat_model_and_zero_radius() {
        let x = randn(&[4, 2], StreamKey::root(1));
        let flat = |tape: &mut Tape, x: Var| -> Result<Var> {
            let z = tape.scale(x, 0.0);
            tape.softmax_rows(z)
        };
        let p = eval(&flat, &x);
        let mut tape = Tape::new();
        let l = vat_loss(&mut tape, &flat, &x, &p, 2.0, 1e-6, 1, StreamKey::root(2)).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let w = Tensor::from_rows(&[vec![2.0, -1.0], vec![0.5, 1.5]]).unwrap();
        let model = linear_softmax(w, Tensor::zeros(&[2]));
        let p = eval(&model, &x);
        let mut tape = Tape::new();
        let l = vat_loss(&mut tape, &model, &x, &p, 0.0, 1e-6, 1, StreamKey::root(2)).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let l = vat_loss(&mut tape, &model, &x, &p, 0.5, 1e-6, 1, StreamKey::root(2)).unwrap();
        assert!(tape.value(l).item() > 0.0);
    }

    #[test]
    fn vat_direction_aligns_with_boundary_normal() {
        // Two classes, logits x·W + b: the KL curvature has rank one along
        // the difference of the class weight columns.
        let w = Tensor::from_rows(&[vec![1.3, -0.4], vec![-0.7, 0.9]]).unwrap();
        let normal = [w.get(0, 0) - w.get(0, 1), w.get(1, 0) - w.get(1, 1)];
        let nn = (normal[0] * normal[0] + normal[1] * normal[1]).sqrt();
        let model = linear_softmax(w, Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
        let x = randn(&[16, 2], StreamKey::root(5));
        let p = eval(&model, &x);
        let mut tape = Tape::new();
        let r = vat_direction(&mut tape, &model, &x, &p, 1e-6, 1, StreamKey::root(6)).unwrap();
        for row in r.iter_rows() {
            let cos = (row[0] * normal[0] + row[1] * normal[1]).abs() / nn;
            let angle = cos.min(1.0).acos().to_degrees();
            assert!(angle < 5.0, "angle {angle}");
        }
    }

    #[test]
    fn vat_gradient_flows_only_into_perturbed_branch() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 0.2]]).unwrap());
        let model = move |tape: &mut Tape, x: Var| -> Result<Var> {
            let z = tape.matmul(x, w)?;
            tape.softmax_rows(z)
        };
        let x = randn(&[3, 2], StreamKey::root(7));
        let p = softmax_rows(&x.matmul(tape.value(w)).unwrap()).unwrap();
        let l = vat_loss(&mut tape, &model, &x, &p, 1.0, 1e-6, 2, StreamKey::root(8)).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(w).unwrap().data().iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn ict_examples() {
        let model = |tape: &mut Tape, x: Var| -> Result<Var> {
            let w = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.5, -0.3, 0.8]]).unwrap());
            let b = tape.constant(Tensor::new(vec![3], vec![0.1, 0.0, -0.2]).unwrap());
            let z = tape.matmul(x, w)?;
            tape.add(z, b)
        };
        let x = randn(&[5, 2], StreamKey::root(11));
        let teacher = eval(&model, &x);
        // An affine readout maps interpolated inputs to interpolated targets.
        for lambda in [0.0, 0.3, 0.77, 1.0] {
            let mut tape = Tape::new();
            let perm = [3, 0, 4, 1, 2];
            let l = ict_loss_with(&mut tape, &model, &x, &teacher, lambda, &perm).unwrap();
            assert!(tape.value(l).item() < 1e-28, "lambda {lambda}");
        }
        let mut tape = Tape::new();
        let l = ict_loss(&mut tape, &model, &x, &teacher, 0.5, StreamKey::root(3)).unwrap();
        assert!(tape.value(l).item() < 1e-28);

        // λ = 1 reduces to plain consistency against the teacher.
        let soft = linear_softmax(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), Tensor::zeros(&[2]));
        let target = softmax_rows(&randn(&[5, 2], StreamKey::root(12))).unwrap();
        let mut tape = Tape::new();
        let l = ict_loss_with(&mut tape, &soft, &x, &target, 1.0, &[1, 2, 3, 4, 0]).unwrap();
        let s = eval(&soft, &x);
        let mut t2 = Tape::new();
        let sv = t2.constant(s);
        let tv = t2.constant(target.clone());
        let mt = mean_teacher_consistency(&mut t2, sv, tv).unwrap();
        assert_eq!(tape.value(l).item(), t2.value(mt).item());

        let one = randn(&[1, 2], StreamKey::root(13));
        let mut tape = Tape::new();
        assert!(ict_loss_with(&mut tape, &soft, &one, &eval(&soft, &one), 0.5, &[0]).is_err());
    }

    #[test]
    fn ict_identical_pairs_make_interpolation_a_no_op() {
        let soft = linear_softmax(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.3, 1.0]]).unwrap(), Tensor::zeros(&[2]));
        let row = vec![0.4, -1.1];
        let x = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let target = softmax_rows(&randn(&[3, 2], StreamKey::root(14))).unwrap();
        let target = Tensor::from_rows(&[target.row(0).to_vec(), target.row(0).to_vec(), target.row(0).to_vec()]).unwrap();
        let mut t1 = Tape::new();
        let a = ict_loss_with(&mut t1, &soft, &x, &target, 0.37, &[1, 2, 0]).unwrap();
        let mut t2 = Tape::new();
        let b = ict_loss_with(&mut t2, &soft, &x, &target, 1.0, &[0, 1, 2]).unwrap();
        assert!((t1.value(a).item() - t2.value(b).item()).abs() < 1e-15);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [SslKind::None, SslKind::PiModel, SslKind::MeanTeacher, SslKind::PseudoLabel, SslKind::Vat, SslKind::Ict] {
            assert_eq!(k.as_str().parse::<SslKind>().unwrap(), k);
        }
        assert!("fixmatch".parse::<SslKind>().is_err());
        assert!(SslMethodConfig::default().validate().is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn losses_are_non_negative(seed in 0u64..100_000) {
                let key = StreamKey::root(seed);
                let p1 = softmax_rows(&randn(&[4, 3], key.child("a"))).unwrap();
                let p2 = softmax_rows(&randn(&[4, 3], key.child("b"))).unwrap();
                let mut tape = Tape::new();
                let (a, b) = (tape.constant(p1.clone()), tape.constant(p2.clone()));
                let l = pi_consistency(&mut tape, a, b).unwrap();
                prop_assert!(tape.value(l).item() >= 0.0);
                let l = mean_teacher_consistency(&mut tape, a, b).unwrap();
                prop_assert!(tape.value(l).item() >= 0.0);
                let l = pseudo_label_loss(&mut tape, a, 0.5).unwrap();
                prop_assert!(tape.value(l).item() >= 0.0);

                let w = randn(&[2, 3], key.child("w"));
                let model = linear_softmax(w, Tensor::zeros(&[3]));
                let x = randn(&[4, 2], key.child("x"));
                let p = eval(&model, &x);
                let l = vat_loss(&mut tape, &model, &x, &p, 1.0, 1e-6, 1, key.child("vat")).unwrap();
                prop_assert!(tape.value(l).item() >= 0.0);
                let l = ict_loss(&mut tape, &model, &x, &p2, 0.5, key.child("ict")).unwrap();
                prop_assert!(tape.value(l).item() >= 0.0);
            }
        }
    }
}
