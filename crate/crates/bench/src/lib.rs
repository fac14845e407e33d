//! Fixtures shared by the benchmarks.

use rand::Rng;
use supercm_core::cm::CmParams;
use supercm_core::nn::{MlpConfig, ParamSet};
use supercm_core::{StreamKey, Tensor};

/// `rows × cols` matrix with entries uniform in `[-1, 1)`.
pub fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = StreamKey::root(seed).child("bench").rng();
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// Balanced labels `i % k`.
pub fn cyclic_labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i % k).collect()
}

/// Backbone and clustering-head parameters for an MLP with `layers`
/// followed by a `k`-way head.
pub fn network(layers: &[usize], k: usize, seed: u64) -> (MlpConfig, ParamSet, CmParams) {
    let cfg = MlpConfig::new(layers.to_vec());
    let ps = supercm_core::nn::init_mlp(&cfg, seed).expect("valid layer sizes");
    let d = *layers.last().expect("non-empty layers");
    let cm = CmParams::init(k, d, StreamKey::root(seed).child("cm")).expect("valid head");
    (cfg, ps, cm)
}
