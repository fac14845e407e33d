use rand::Rng;
use rand_distr::StandardNormal;

use super::{ParamSet, VarMap};
use crate::adcore::{Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::rng::StreamKey;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    /// Input width, hidden widths..., feature width.
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
    /// Standard deviation of Gaussian jitter added to inputs in train mode.
    pub input_noise_sigma: f64,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>) -> Self {
        Self {
            layer_sizes,
            dropout_rate: 0.0,
            input_noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(invalid("an MLP needs an input width and at least one layer"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(invalid(format!("zero-width layer in {:?}", self.layer_sizes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.input_noise_sigma >= 0.0) {
            return Err(invalid("input noise sigma must be non-negative"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A ReLU MLP whose parameters are named `{prefix}.w{i}` / `{prefix}.b{i}`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub config: MlpConfig,
    pub prefix: String,
}

impl Mlp {
    pub fn new(config: MlpConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            prefix: prefix.into(),
        })
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    /// He-scaled uniform weights `U(-a, a)` with `a = sqrt(6 / fan_in)`
    /// (variance `2 / fan_in`); zero biases.
    pub fn init(&self, key: StreamKey) -> ParamSet {
        let mut ps = ParamSet::new();
        for (l, pair) in self.config.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / fan_in as f64).sqrt();
            let mut rng = key.child("init").index(l as u64).rng();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
            ps.insert(self.weight_name(l), Tensor::matrix(fan_in, fan_out, w).unwrap());
            ps.insert(self.bias_name(l), Tensor::zeros(&[fan_out]));
        }
        ps
    }

    /// Features for a batch. Train mode adds input noise, then applies
    /// affine + ReLU + dropout per layer; eval mode is deterministic.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &VarMap,
        x: Var,
        mode: Mode,
        key: StreamKey,
    ) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.config.input_dim() || tape.value(x).shape().len() != 2 {
            return Err(shape_err(
                "mlp_forward",
                format!("input {:?}, expected width {}", tape.value(x).shape(), self.config.input_dim()),
            ));
        }
        let train = mode == Mode::Train;
        let mut h = x;
        if train && self.config.input_noise_sigma > 0.0 {
            let shape = tape.value(x).shape().to_vec();
            let sigma = self.config.input_noise_sigma;
            let mut rng = key.child("input-noise").rng();
            let n: usize = shape.iter().product();
            let noise: Vec<f64> = (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            let nv = tape.constant(Tensor::new(shape, noise)?);
            h = tape.add(h, nv)?;
        }
        for l in 0..self.config.num_layers() {
            let w = vars.get(&self.weight_name(l))?;
            let b = vars.get(&self.bias_name(l))?;
            h = affine(tape, h, w, b)?;
            h = tape.relu(h);
            if train && self.config.dropout_rate > 0.0 {
                let mask = dropout_mask(
                    tape.value(h).shape(),
                    self.config.dropout_rate,
                    key.child("dropout").index(l as u64),
                );
                h = tape.dropout(h, mask)?;
            }
        }
        Ok(h)
    }
}

/// `x · w + b` with `b` broadcast over rows.
pub fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let m = tape.matmul(x, w)?;
    tape.add(m, b)
}

/// Inverted-dropout mask: kept entries are `1 / (1 - rate)`, dropped are 0.
pub fn dropout_mask(shape: &[usize], rate: f64, key: StreamKey) -> Tensor {
    let mut rng = key.rng();
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Initializes a backbone MLP under the `backbone` prefix.
pub fn init_mlp(config: &MlpConfig, seed: u64) -> Result<ParamSet> {
    let mlp = Mlp::new(config.clone(), "backbone")?;
    Ok(mlp.init(StreamKey::root(seed).child("backbone")))
}

/// Forward pass of a `backbone`-prefixed MLP on a plain input matrix.
pub fn forward_features(
    config: &MlpConfig,
    params: &ParamSet,
    x: &Tensor,
    mode: Mode,
    key: StreamKey,
) -> Result<Tensor> {
    let mlp = Mlp::new(config.clone(), "backbone")?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, |_| false);
    let xv = tape.constant(x.clone());
    let f = mlp.forward(&mut tape, &vars, xv, mode, key)?;
    Ok(tape.value(f).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = MlpConfig::new(vec![2, 4]);
        let a = init_mlp(&cfg, 5).unwrap();
        let b = init_mlp(&cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_mlp(&cfg, 6).unwrap());
        assert!(a.get("backbone.b0").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_variance_matches_he_scaling() {
        let fan_in = 50;
        let cfg = MlpConfig::new(vec![fan_in, 200]);
        let ps = init_mlp(&cfg, 1).unwrap();
        let w = ps.get("backbone.w0").unwrap().data();
        assert_eq!(w.len(), 10_000);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / fan_in as f64;
        assert!((var - target).abs() / target < 0.2, "var {var} target {target}");
    }

    #[test]
    fn zero_width_layer_rejected() {
        assert!(init_mlp(&MlpConfig::new(vec![2, 0, 3]), 0).is_err());
        assert!(init_mlp(&MlpConfig::new(vec![2]), 0).is_err());
    }

    fn cfg_noisy() -> MlpConfig {
        MlpConfig {
            layer_sizes: vec![3, 8, 4],
            dropout_rate: 0.3,
            input_noise_sigma: 0.5,
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_is_not() {
        let cfg = cfg_noisy();
        let ps = init_mlp(&cfg, 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 0.5]]).unwrap();
        let e1 = forward_features(&cfg, &ps, &x, Mode::Eval, StreamKey::root(1)).unwrap();
        let e2 = forward_features(&cfg, &ps, &x, Mode::Eval, StreamKey::root(2)).unwrap();
        assert_eq!(e1, e2);
        let t1 = forward_features(&cfg, &ps, &x, Mode::Train, StreamKey::root(1)).unwrap();
        let t2 = forward_features(&cfg, &ps, &x, Mode::Train, StreamKey::root(2)).unwrap();
        let t1b = forward_features(&cfg, &ps, &x, Mode::Train, StreamKey::root(1)).unwrap();
        assert_ne!(t1, t2);
        assert_eq!(t1, t1b);
    }

    #[test]
    fn train_equals_eval_without_noise() {
        let cfg = MlpConfig::new(vec![3, 8, 4]);
        let ps = init_mlp(&cfg, 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        let e = forward_features(&cfg, &ps, &x, Mode::Eval, StreamKey::root(1)).unwrap();
        let t = forward_features(&cfg, &ps, &x, Mode::Train, StreamKey::root(1)).unwrap();
        assert_eq!(e, t);
    }

    #[test]
    fn identity_layer_passes_positive_input() {
        let cfg = MlpConfig::new(vec![3, 3]);
        let mut ps = ParamSet::new();
        ps.insert("backbone.w0", Tensor::identity(3));
        ps.insert("backbone.b0", Tensor::zeros(&[3]));
        let x = Tensor::from_rows(&[vec![0.5, 1.5, 2.0], vec![3.0, 0.25, 1.0]]).unwrap();
        let f = forward_features(&cfg, &ps, &x, Mode::Eval, StreamKey::root(0)).unwrap();
        assert_eq!(f, x);
    }

    #[test]
    fn input_width_mismatch_rejected() {
        let cfg = MlpConfig::new(vec![3, 3]);
        let ps = init_mlp(&cfg, 0).unwrap();
        let x = Tensor::zeros(&[2, 4]);
        assert!(forward_features(&cfg, &ps, &x, Mode::Eval, StreamKey::root(0)).is_err());
    }

    #[test]
    fn dropout_mask_scaling() {
        let m = dropout_mask(&[100, 100], 0.25, StreamKey::root(3));
        let kept = m.data().iter().filter(|&&v| v > 0.0).count() as f64 / 1e4;
        assert!((kept - 0.75).abs() < 0.02);
        assert!(m.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
    }
}
