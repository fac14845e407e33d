//! Clustering head: a one-layer autoencoder producing soft assignments and
//! centroid reconstructions, trained with a four-term clustering loss.

use rand::Rng;

use crate::adcore::{Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{ParamSet, VarMap};
use crate::rng::StreamKey;

pub const W_NAME: &str = "cm.w";
pub const B_NAME: &str = "cm.b";
pub const M_NAME: &str = "cm.m";

/// Encoder weights `w` (K×d), bias `b` (K) and centroids `m` (K×d, rows are μ_k).
#[derive(Clone, Debug, PartialEq)]
pub struct CmParams {
    pub w: Tensor,
    pub b: Tensor,
    pub m: Tensor,
}

impl CmParams {
    pub fn new(w: Tensor, b: Tensor, m: Tensor) -> Result<Self> {
        let (k, d) = (w.rows(), w.cols());
        if w.shape().len() != 2 || k < 2 {
            return Err(invalid(format!("encoder must be K×d with K ≥ 2, got {:?}", w.shape())));
        }
        if b.len() != k || m.shape() != [k, d] {
            return Err(shape_err(
                "cm_params",
                format!("w {:?}, b {:?}, m {:?}", w.shape(), b.shape(), m.shape()),
            ));
        }
        if !(w.is_finite() && b.is_finite() && m.is_finite()) {
            return Err(Error::NonFinite { what: "cm parameters".into() });
        }
        Ok(Self { w, b, m })
    }

    /// Glorot-uniform encoder, zero bias, small uniform centroids.
    pub fn init(k: usize, d: usize, key: StreamKey) -> Result<Self> {
        if k < 2 || d == 0 {
            return Err(invalid(format!("cm head needs K ≥ 2 and d ≥ 1, got K={k}, d={d}")));
        }
        let a = (6.0 / (k + d) as f64).sqrt();
        let mut rng = key.child("cm-w").rng();
        let w = (0..k * d).map(|_| rng.random_range(-a..a)).collect();
        let mut rng = key.child("cm-m").rng();
        let m = (0..k * d).map(|_| rng.random_range(-0.1..0.1)).collect();
        Self::new(Tensor::matrix(k, d, w)?, Tensor::zeros(&[k]), Tensor::matrix(k, d, m)?)
    }

    pub fn k(&self) -> usize {
        self.w.rows()
    }

    pub fn d(&self) -> usize {
        self.w.cols()
    }

    pub fn insert_into(&self, ps: &mut ParamSet) {
        ps.insert(W_NAME, self.w.clone());
        ps.insert(B_NAME, self.b.clone());
        ps.insert(M_NAME, self.m.clone());
    }

    pub fn from_params(ps: &ParamSet) -> Result<Self> {
        Self::new(ps.require(W_NAME)?.clone(), ps.require(B_NAME)?.clone(), ps.require(M_NAME)?.clone())
    }
}

/// Tape handles for the head parameters.
#[derive(Clone, Copy, Debug)]
pub struct CmVars {
    pub w: Var,
    pub b: Var,
    pub m: Var,
}

impl CmVars {
    pub fn from_map(vars: &VarMap) -> Result<Self> {
        Ok(Self {
            w: vars.get(W_NAME)?,
            b: vars.get(B_NAME)?,
            m: vars.get(M_NAME)?,
        })
    }

    pub fn register(tape: &mut Tape, p: &CmParams, trainable: bool) -> Self {
        let reg = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            w: reg(tape, &p.w),
            b: reg(tape, &p.b),
            m: reg(tape, &p.m),
        }
    }
}

/// Responsibilities `gamma` (n×K) and reconstructions `recon = gamma · M` (n×d).
#[derive(Clone, Copy, Debug)]
pub struct CmOutput {
    pub gamma: Var,
    pub recon: Var,
}

pub fn cm_forward(tape: &mut Tape, cm: CmVars, x: Var) -> Result<CmOutput> {
    let (xv, wv) = (tape.value(x), tape.value(cm.w));
    if xv.shape().len() != 2 || xv.cols() != wv.cols() {
        return Err(shape_err("cm_forward", format!("input {:?} with encoder {:?}", xv.shape(), wv.shape())));
    }
    if !xv.is_finite() {
        return Err(Error::NonFinite { what: "cm input".into() });
    }
    let logits = tape.matmul_nt(x, cm.w)?;
    let logits = tape.add(logits, cm.b)?;
    let gamma = tape.softmax_rows(logits)?;
    let recon = tape.matmul(gamma, cm.m)?;
    Ok(CmOutput { gamma, recon })
}

/// Responsibilities for plain tensors, outside any training graph.
pub fn cm_gamma(p: &CmParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = CmVars::register(&mut tape, p, false);
    let xv = tape.constant(x.clone());
    let out = cm_forward(&mut tape, vars, xv)?;
    Ok(tape.value(out.gamma).clone())
}

/// Scalar values of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CmLossBreakdown {
    /// Reconstruction error.
    pub e1: f64,
    /// Sparsity of the assignments.
    pub e2: f64,
    /// Cross-centroid interaction.
    pub e3: f64,
    /// Dirichlet prior on mean assignments.
    pub e4: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct CmLossTerms {
    pub e1: Var,
    pub e2: Var,
    pub e3: Var,
    pub e4: Var,
    pub total: Var,
}

/// Clustering loss in minimization form:
///
/// * `e1 = (1/n) Σ_i ‖x_i − x̄_i‖²`
/// * `e2 = (1/n) Σ_i Σ_k γ_ik (1 − γ_ik) ‖μ_k‖²`
/// * `e3 = −(1/n) Σ_i Σ_{j≠l} γ_ij γ_il μ_jᵀ μ_l`
/// * `e4 = (1/n) (1 − α) Σ_k log γ̃_k`, with `γ̃_k` the batch mean of `γ_·k`
pub fn cm_loss(tape: &mut Tape, x: Var, out: &CmOutput, m: Var, alpha: f64) -> Result<(CmLossTerms, CmLossBreakdown)> {
    if !(alpha >= 1.0) || !alpha.is_finite() {
        return Err(invalid(format!("Dirichlet coefficient must be ≥ 1, got {alpha}")));
    }
    let (n, d) = (tape.value(x).rows(), tape.value(x).cols());
    let (gn, k) = (tape.value(out.gamma).rows(), tape.value(out.gamma).cols());
    let ms = tape.value(m).shape().to_vec();
    if n == 0 {
        return Err(Error::Empty { op: "cm_loss" });
    }
    if gn != n || ms != [k, d] || tape.value(out.recon).shape() != [n, d] {
        return Err(shape_err(
            "cm_loss",
            format!("x [{n}, {d}], gamma [{gn}, {k}], m {ms:?}"),
        ));
    }
    let inv_n = 1.0 / n as f64;
    let gamma = out.gamma;

    let diff = tape.sub(x, out.recon)?;
    let e1 = tape.sq_l2(diff);
    let e1 = tape.scale(e1, inv_n);

    // ‖μ_k‖² as a K×1 column.
    let m2 = tape.mul(m, m)?;
    let ones_d = tape.constant(Tensor::full(&[d, 1], 1.0));
    let norms = tape.matmul(m2, ones_d)?;
    let g2 = tape.mul(gamma, gamma)?;
    let spread = tape.sub(gamma, g2)?;
    let e2 = tape.matmul(spread, norms)?;
    let e2 = tape.sum(e2);
    let e2 = tape.scale(e2, inv_n);

    let gram = tape.matmul_nt(m, m)?;
    let mut off = Tensor::full(&[k, k], 1.0);
    for j in 0..k {
        off.set(j, j, 0.0);
    }
    let off = tape.constant(off);
    let gram_off = tape.mul(gram, off)?;
    let mixed = tape.matmul(gamma, gram_off)?;
    let mixed = tape.mul(mixed, gamma)?;
    let e3 = tape.sum(mixed);
    let e3 = tape.scale(e3, -inv_n);

    let e4 = if alpha == 1.0 {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let ones_n = tape.constant(Tensor::full(&[1, n], 1.0));
        let mean_gamma = tape.matmul(ones_n, gamma)?;
        let mean_gamma = tape.scale(mean_gamma, inv_n);
        if let Some(kz) = tape.value(mean_gamma).data().iter().position(|&g| g == 0.0) {
            return Err(invalid(format!("mean responsibility of cluster {kz} is zero; prior term undefined")));
        }
        let logs = tape.log(mean_gamma);
        let s = tape.sum(logs);
        tape.scale(s, inv_n * (1.0 - alpha))
    };

    let t = tape.add(e1, e2)?;
    let t = tape.add(t, e3)?;
    let total = tape.add(t, e4)?;
    let bd = CmLossBreakdown {
        e1: tape.value(e1).item(),
        e2: tape.value(e2).item(),
        e3: tape.value(e3).item(),
        e4: tape.value(e4).item(),
        total: tape.value(total).item(),
        alpha,
    };
    Ok((CmLossTerms { e1, e2, e3, e4, total }, bd))
}

/// Loss values for plain tensors.
pub fn cm_loss_values(p: &CmParams, x: &Tensor, alpha: f64) -> Result<CmLossBreakdown> {
    let mut tape = Tape::new();
    let vars = CmVars::register(&mut tape, p, false);
    let xv = tape.constant(x.clone());
    let out = cm_forward(&mut tape, vars, xv)?;
    Ok(cm_loss(&mut tape, xv, &out, vars.m, alpha)?.1)
}

/// `γ(1−γ)(‖μ1‖² + ‖μ2‖² − 2 μ1ᵀμ2)`: the sparsity plus cross-centroid terms
/// for a single point split between two clusters.
pub fn two_cluster_gap(gamma: f64, mu1: &[f64], mu2: &[f64]) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("responsibility {gamma} outside [0, 1]")));
    }
    if mu1.len() != mu2.len() {
        return Err(shape_err("two_cluster_gap", format!("{} vs {}", mu1.len(), mu2.len())));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok(gamma * (1.0 - gamma) * (dot(mu1, mu1) + dot(mu2, mu2) - 2.0 * dot(mu1, mu2)))
}
