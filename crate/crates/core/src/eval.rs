//! Accuracy, seed summaries, paired t-tests and PCA projection.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::adcore::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Fraction of positions where `pred` equals `truth`.
pub fn top1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(invalid("top1 of an empty prediction set"));
    }
    if pred.len() != truth.len() {
        return Err(shape_err("top1", format!("{} predictions, {} labels", pred.len(), truth.len())));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mean and sample standard deviation (n − 1 denominator) over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl SeedSummary {
    pub fn from_values(v: &[f64]) -> Result<Self> {
        if v.is_empty() {
            return Err(invalid("summary of zero runs"));
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { n, mean, std })
    }
}

/// Outcome of a paired t-test on `a − b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub mean_diff: f64,
}

impl TTest {
    /// One-sided p-value for the alternative `mean(a − b) > 0`.
    pub fn p_greater(&self) -> f64 {
        if self.t.is_infinite() || self.t == 0.0 {
            return if self.mean_diff > 0.0 { 0.0 } else { 1.0 };
        }
        if self.t > 0.0 {
            self.p / 2.0
        } else {
            1.0 - self.p / 2.0
        }
    }
}

/// Two-sided paired t-test over runs matched by seed. Zero-variance
/// differences give `p = 0` when the mean difference is non-zero and `p = 1`
/// otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(shape_err("paired_t_test", format!("{} vs {} runs", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(invalid("paired t-test needs at least 2 paired runs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let s = SeedSummary::from_values(&d)?;
    if s.std == 0.0 {
        return Ok(if s.mean == 0.0 {
            TTest { t: 0.0, p: 1.0, mean_diff: 0.0 }
        } else {
            TTest {
                t: f64::INFINITY.copysign(s.mean),
                p: 0.0,
                mean_diff: s.mean,
            }
        });
    }
    let t = s.mean / (s.std / (s.n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (s.n - 1) as f64).map_err(|e| invalid(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, p, mean_diff: s.mean })
}

/// Principal-component projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `n × out_dim` projected, mean-centered data.
    pub projection: Tensor,
    /// `out_dim × d` unit-norm, mutually orthogonal directions.
    pub components: Tensor,
    /// Variance along each direction.
    pub variances: Vec<f64>,
}

const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITERS: usize = 100_000;

/// Projects mean-centered `x` onto its top `out_dim` principal directions,
/// found by power iteration with deflation. Directions past the data rank are
/// completed with arbitrary orthonormal vectors.
pub fn pca_project(x: &Tensor, out_dim: usize) -> Result<Pca> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(invalid("PCA needs at least 2 samples"));
    }
    if out_dim == 0 || out_dim > d {
        return Err(invalid(format!("cannot project {d}-D data onto {out_dim} components")));
    }
    let mut mean = vec![0.0; d];
    for r in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered = Tensor::from_rows(
        &x.iter_rows()
            .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    )?;
    let mut cov = centered.transpose().matmul(&centered)?.map(|v| v / (n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    if !(trace > 0.0) {
        return Err(invalid("PCA of rank-0 data"));
    }
    let floor = trace * 1e-12;
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
    let mut variances = Vec::with_capacity(out_dim);
    for _ in 0..out_dim {
        match power_iteration(&cov, floor) {
            Some((lambda, v)) => {
                for i in 0..d {
                    for j in 0..d {
                        let c = cov.get(i, j) - lambda * v[i] * v[j];
                        cov.set(i, j, c);
                    }
                }
                comps.push(v);
                variances.push(lambda);
            }
            None => {
                comps.push(orthogonal_completion(&comps, d));
                variances.push(0.0);
            }
        }
    }
    let components = Tensor::from_rows(&comps)?;
    let projection = centered.matmul(&components.transpose())?;
    Ok(Pca {
        projection,
        components,
        variances,
    })
}

fn power_iteration(c: &Tensor, floor: f64) -> Option<(f64, Vec<f64>)> {
    let d = c.rows();
    // Start from the column with the largest norm: never orthogonal to the range.
    let col_norm = |j: usize| (0..d).map(|i| c.get(i, j).powi(2)).sum::<f64>();
    let j0 = (0..d).max_by(|&a, &b| col_norm(a).total_cmp(&col_norm(b)))?;
    let norm0 = col_norm(j0).sqrt();
    if norm0 <= floor {
        return None;
    }
    let mut v: Vec<f64> = (0..d).map(|i| c.get(i, j0) / norm0).collect();
    for _ in 0..PCA_MAX_ITERS {
        let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| c.get(i, j) * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= floor {
            return None;
        }
        let w: Vec<f64> = w.iter().map(|x| x / norm).collect();
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < PCA_TOL {
            break;
        }
    }
    let lambda: f64 = (0..d).map(|i| v[i] * (0..d).map(|j| c.get(i, j) * v[j]).sum::<f64>()).sum();
    (lambda > floor).then_some((lambda, v))
}

fn orthogonal_completion(basis: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut best = vec![0.0; d];
    let mut best_norm = -1.0;
    for e in 0..d {
        let mut v = vec![0.0; d];
        v[e] = 1.0;
        for b in basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = v.iter().map(|x| x / norm).collect();
        }
    }
    best
}
