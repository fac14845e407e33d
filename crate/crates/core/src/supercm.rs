//! Supervised centroid tracking and the combined training objective.

use crate::adcore::{Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::ParamSet;

pub const TRACKER_MU: &str = "tracker.mu";
pub const TRACKER_COUNTS: &str = "tracker.counts";

/// Lower clamp applied to responsibilities before the log in the CE term.
pub const CE_LOG_FLOOR: f64 = 1e-12;

/// How a batch's class-`k` sum is normalized before entering the running mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CentroidNormalization {
    /// Divide by the number of class-`k` rows.
    #[default]
    ClassMean,
    /// Divide by the total number of rows in the update.
    BatchSize,
}

/// Running per-class centroids with one update counter per class.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidTracker {
    mu: Tensor,
    counts: Vec<u64>,
    pub normalization: CentroidNormalization,
}

impl CentroidTracker {
    pub fn new(init_mu: Tensor) -> Result<Self> {
        if init_mu.shape().len() != 2 || init_mu.rows() < 2 || init_mu.cols() == 0 {
            return Err(invalid(format!("tracker needs a K×d matrix with K ≥ 2, got {:?}", init_mu.shape())));
        }
        let k = init_mu.rows();
        Ok(Self {
            mu: init_mu,
            counts: vec![0; k],
            normalization: CentroidNormalization::ClassMean,
        })
    }

    pub fn zeros(k: usize, d: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[k, d]))
    }

    pub fn with_normalization(mut self, normalization: CentroidNormalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn k(&self) -> usize {
        self.mu.rows()
    }

    /// Folds one batch into the running means. For each class `k` present:
    /// `counts[k] += 1; mu[k] ← ((c−1)/c)·mu[k] + (1/c)·m_k`.
    pub fn update(&mut self, x: &Tensor, y: &[usize]) -> Result<()> {
        let rows: Vec<usize> = (0..y.len()).collect();
        self.update_rows(&[(x, &rows, y)])
    }

    /// Updates from labeled rows plus target rows whose top responsibility
    /// reaches `conf_threshold`, taken with their argmax class.
    pub fn update_with_pseudo(
        &mut self,
        x_l: &Tensor,
        y_l: &[usize],
        x_t: &Tensor,
        gamma_t: &Tensor,
        conf_threshold: f64,
    ) -> Result<()> {
        let picked = confident_rows(gamma_t, conf_threshold)?;
        if gamma_t.rows() != x_t.rows() {
            return Err(shape_err("update_with_pseudo", format!("{} target rows, {} gamma rows", x_t.rows(), gamma_t.rows())));
        }
        let lrows: Vec<usize> = (0..y_l.len()).collect();
        let (trows, tlabels): (Vec<usize>, Vec<usize>) = picked.into_iter().unzip();
        self.update_rows(&[(x_l, &lrows, y_l), (x_t, &trows, &tlabels)])
    }

    fn update_rows(&mut self, parts: &[(&Tensor, &[usize], &[usize])]) -> Result<()> {
        let (k, d) = (self.mu.rows(), self.mu.cols());
        let mut sums = vec![0.0; k * d];
        let mut class_n = vec![0usize; k];
        let mut total = 0usize;
        for &(x, rows, labels) in parts {
            if rows.len() != labels.len() || (!rows.is_empty() && (x.cols() != d || x.shape().len() != 2)) {
                return Err(shape_err("update_centroids", format!("features {:?}, {} labels, tracker d={d}", x.shape(), labels.len())));
            }
            if x.rows() < rows.len() {
                return Err(shape_err("update_centroids", format!("{} rows for {} labels", x.rows(), labels.len())));
            }
            for (&r, &c) in rows.iter().zip(labels) {
                if c >= k {
                    return Err(invalid(format!("label {c} out of range for {k} classes")));
                }
                let row = x.row(r);
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { what: format!("feature row {r}") });
                }
                for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                    *s += v;
                }
                class_n[c] += 1;
                total += 1;
            }
        }
        for c in 0..k {
            if class_n[c] == 0 {
                continue;
            }
            let denom = match self.normalization {
                CentroidNormalization::ClassMean => class_n[c],
                CentroidNormalization::BatchSize => total,
            } as f64;
            self.counts[c] += 1;
            let cnt = self.counts[c] as f64;
            let keep = (cnt - 1.0) / cnt;
            for (j, mu) in self.mu.row_mut(c).iter_mut().enumerate() {
                *mu = keep * *mu + sums[c * d + j] / denom / cnt;
            }
        }
        Ok(())
    }

    pub fn insert_into(&self, ps: &mut ParamSet) {
        ps.insert(TRACKER_MU, self.mu.clone());
        let counts = self.counts.iter().map(|&c| c as f64).collect();
        ps.insert(TRACKER_COUNTS, Tensor::new(vec![self.counts.len()], counts).unwrap());
    }

    pub fn from_params(ps: &ParamSet) -> Result<Self> {
        let mut t = Self::new(ps.require(TRACKER_MU)?.clone())?;
        let counts = ps.require(TRACKER_COUNTS)?;
        if counts.len() != t.k() || counts.data().iter().any(|&c| c < 0.0 || c.fract() != 0.0) {
            return Err(invalid("tracker counts must be K non-negative integers"));
        }
        t.counts = counts.data().iter().map(|&c| c as u64).collect();
        Ok(t)
    }
}

/// Rows of `gamma` whose maximum reaches `threshold`, paired with their argmax.
pub fn confident_rows(gamma: &Tensor, threshold: f64) -> Result<Vec<(usize, usize)>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(invalid(format!("confidence threshold {threshold} outside (0, 1]")));
    }
    Ok(gamma
        .iter_rows()
        .enumerate()
        .filter_map(|(i, r)| {
            let (c, &g) = argmax(r);
            (g >= threshold).then_some((i, c))
        })
        .collect())
}

fn argmax(r: &[f64]) -> (usize, &f64) {
    r.iter()
        .enumerate()
        .fold((0, &r[0]), |best, (i, v)| if *v > *best.1 { (i, v) } else { best })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CentroidStrategy {
    /// Centroids from labeled features only.
    Gs,
    /// Labeled features plus confident target features.
    GsPt { conf_threshold: f64 },
    /// Centroids trained by gradient descent like any other parameter.
    Learned,
}

impl CentroidStrategy {
    pub fn validate(&self) -> Result<()> {
        if let Self::GsPt { conf_threshold } = *self {
            if !(conf_threshold > 0.0 && conf_threshold <= 1.0) {
                return Err(invalid(format!("confidence threshold {conf_threshold} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn centroids_trainable(&self) -> bool {
        matches!(self, Self::Learned)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the clustering loss.
    pub beta: f64,
    /// Weight of the base SSL/UDA loss.
    pub delta: f64,
    /// Dirichlet coefficient of the clustering loss.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.18,
            delta: 0.0,
            alpha: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite() && self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if !(self.alpha >= 1.0) {
            return Err(invalid(format!("Dirichlet coefficient must be ≥ 1, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `−(1/n) Σ_i log max(γ_{i,y_i}, 1e-12)`
pub fn cross_entropy(tape: &mut Tape, gamma: Var, y: &[usize]) -> Result<Var> {
    let (n, k) = (tape.value(gamma).rows(), tape.value(gamma).cols());
    if y.is_empty() || n == 0 {
        return Err(Error::Empty { op: "cross_entropy" });
    }
    if y.len() != n {
        return Err(shape_err("cross_entropy", format!("{n} rows, {} labels", y.len())));
    }
    let mut onehot = Tensor::zeros(&[n, k]);
    for (i, &c) in y.iter().enumerate() {
        if c >= k {
            return Err(invalid(format!("label {c} out of range for {k} classes")));
        }
        onehot.set(i, c, 1.0);
    }
    let onehot = tape.constant(onehot);
    let logg = tape.log_clamped(gamma, CE_LOG_FLOOR);
    let picked = tape.mul(logg, onehot)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TotalBreakdown {
    pub ce: f64,
    pub cm: f64,
    pub base: f64,
    pub total: f64,
}

/// `CE(γ_l, y_l) + β·cm_total + δ·base_loss`
pub fn supercm_total_loss(
    tape: &mut Tape,
    gamma_l: Var,
    y_l: &[usize],
    cm_total: Var,
    base_loss: Var,
    weights: &LossWeights,
) -> Result<(Var, TotalBreakdown)> {
    weights.validate()?;
    for (what, v) in [("clustering loss", cm_total), ("base loss", base_loss)] {
        let t = tape.value(v);
        if t.len() != 1 {
            return Err(Error::NonScalarOutput { shape: t.shape().to_vec() });
        }
        if !t.item().is_finite() {
            return Err(Error::NonFinite { what: what.into() });
        }
    }
    let ce = cross_entropy(tape, gamma_l, y_l)?;
    let cm = tape.scale(cm_total, weights.beta);
    let base = tape.scale(base_loss, weights.delta);
    let t = tape.add(ce, cm)?;
    let total = tape.add(t, base)?;
    let bd = TotalBreakdown {
        ce: tape.value(ce).item(),
        cm: tape.value(cm_total).item(),
        base: tape.value(base_loss).item(),
        total: tape.value(total).item(),
    };
    Ok((total, bd))
}

/// Argmax per row; ties go to the lowest class index.
pub fn predict(gamma: &Tensor) -> Vec<usize> {
    if gamma.cols() == 0 {
        return vec![0; gamma.rows()];
    }
    gamma.iter_rows().map(|r| argmax(r).0).collect()
}
