use std::collections::BTreeMap;

use super::ParamSet;
use crate::adcore::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// SGD with Nesterov momentum; `momentum = 0` is plain SGD.
    SgdNesterov { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn nesterov(momentum: f64) -> Self {
        Self::SgdNesterov { momentum }
    }
}

/// Per-parameter optimizer buffers. Weight decay is applied as an L2 term
/// folded into the gradient (`g + weight_decay * p`).
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Result<Self> {
        if !(weight_decay >= 0.0) {
            return Err(invalid("weight decay must be non-negative"));
        }
        Ok(Self {
            kind,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    /// Updates every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of `{name}`"),
                });
            }
            let p = params
                .get(name)
                .ok_or_else(|| invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(invalid(format!(
                    "gradient shape {:?} does not match `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let wd = self.weight_decay;
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap();
            let shape = p.shape().to_vec();
            match self.kind {
                OptimizerKind::SgdNesterov { momentum } => {
                    let v = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(&shape));
                    for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        let gt = gi + wd * *pi;
                        *vi = momentum * *vi + gt;
                        *pi -= lr * (gt + momentum * *vi);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(&shape));
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(&shape));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((pi, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let gt = gi + wd * *pi;
                        *mi = beta1 * *mi + (1.0 - beta1) * gt;
                        *vi = beta2 * *vi + (1.0 - beta2) * gt * gt;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *pi -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
