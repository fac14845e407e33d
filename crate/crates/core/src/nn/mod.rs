//! MLP backbones, optimizers, learning-rate schedules and weight averaging.

mod average;
pub mod checkpoint;
mod mlp;
mod optim;
mod schedule;

use std::collections::BTreeMap;

pub use average::WeightAverager;
pub use mlp::{affine, dropout_mask, forward_features, init_mlp, Mlp, MlpConfig, Mode};
pub use optim::{OptimizerKind, OptimizerState};
pub use schedule::LrSchedule;

use crate::adcore::{Gradients, Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    /// Puts every tensor on the tape. Names accepted by `trainable` become
    /// leaves; the rest are constants.
    pub fn register(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> VarMap {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        VarMap(vars)
    }
}

/// Tape handles for a registered [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct VarMap(BTreeMap<String, Var>);

impl VarMap {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("parameter `{name}` is not registered")))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.0.insert(name.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }

    /// Gradients of every registered leaf, keyed by parameter name.
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.0
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}
