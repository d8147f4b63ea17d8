//! Straight-through training of residual-binarized dense networks.
//!
//! The forward pass uses binarized weights `γ_w·Sign(W)` and residual-encoded
//! activations. The backward pass updates full-precision shadow parameters:
//!
//! ```text
//! ∂L/∂γ_i = Σ ∂L/∂e · Sign(r_i)
//! ∂L/∂x   = ∂L/∂e · Σ_i γ_i · 1{|r_i| ≤ clip}
//! ```
//!
//! with the same rule applied to weights (`x = w`, one level, scale `γ_w`).

mod export;
mod gradcheck;
mod net;
mod trainer;

pub use export::{export, ExportDiagnostics, ExportReport};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use net::{backward, forward_train, grad_gamma, grad_input, Cache};
pub use trainer::{evaluate, predict, train_loop, Dataset, EpochRecord, TrainOutcome};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-layer weight scale is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightGammaMode {
    /// Learned with the `∂L/∂γ` rule.
    Trained,
    /// Recomputed as `mean |W|` on every forward pass.
    MeanAbs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Residual levels `M` for every hidden activation.
    pub levels: usize,
    /// Bound of the straight-through indicator `1{|x| ≤ clip}`.
    pub clip: f64,
    pub weight_gamma: WeightGammaMode,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            levels: 1,
            clip: 1.0,
            weight_gamma: WeightGammaMode::Trained,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::input("epochs and batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::input("learning rate must be positive"));
        }
        if self.levels == 0 || self.levels > crate::residual::MAX_LEVELS {
            return Err(Error::input(format!("unsupported level count {}", self.levels)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::input("clip bound must be positive"));
        }
        Ok(())
    }
}

/// Trainable parameters of one dense block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `out × in` shadow weights.
    pub weights: Array2<f64>,
    pub weight_gamma: f64,
    pub bn_gain: Array1<f64>,
    pub bn_bias: Array1<f64>,
}

/// All trainable parameters; also used as the gradient and moment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<LayerParams>,
    /// Activation scales, one vector of `M` per hidden layer.
    pub gammas: Vec<Array1<f64>>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    weight_gamma: 0.0,
                    bn_gain: Array1::zeros(l.bn_gain.len()),
                    bn_bias: Array1::zeros(l.bn_bias.len()),
                })
                .collect(),
            gammas: self.gammas.iter().map(|g| Array1::zeros(g.len())).collect(),
        }
    }

    /// Flat views of every parameter group, in a fixed order.
    pub fn groups(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("standard layout"));
            out.push(std::slice::from_ref(&l.weight_gamma));
            out.push(l.bn_gain.as_slice().expect("standard layout"));
            out.push(l.bn_bias.as_slice().expect("standard layout"));
        }
        for g in &self.gammas {
            out.push(g.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(std::slice::from_mut(&mut l.weight_gamma));
            out.push(l.bn_gain.as_slice_mut().expect("standard layout"));
            out.push(l.bn_bias.as_slice_mut().expect("standard layout"));
        }
        for g in &mut self.gammas {
            out.push(g.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in self.groups().into_iter().flatten() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Batch-norm population statistics tracked during training.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Full training state: shadow parameters, optimizer moments, and
/// batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub widths: Vec<usize>,
    pub config: TrainConfig,
    pub params: Params,
    pub first_moment: Params,
    pub second_moment: Params,
    pub running: Vec<RunningStats>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl ParamState {
    /// Glorot-uniform weights, identity batch norm, halving activation scales.
    pub fn init(widths: &[usize], config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::input(format!("invalid layer widths {widths:?}")));
        }
        let layers: Vec<LayerParams> = widths
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-a..a));
                let weight_gamma = weights.iter().map(|w: &f64| w.abs()).sum::<f64>() / weights.len() as f64;
                LayerParams {
                    weights,
                    weight_gamma,
                    bn_gain: Array1::ones(fan_out),
                    bn_bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        let gammas = (0..widths.len() - 2)
            .map(|_| Array1::from_shape_fn(config.levels, |i| 0.5f64.powi(i as i32)))
            .collect();
        let params = Params { layers, gammas };
        let running = widths[1..]
            .iter()
            .map(|&w| RunningStats {
                mean: Array1::zeros(w),
                var: Array1::ones(w),
            })
            .collect();
        Ok(ParamState {
            widths: widths.to_vec(),
            config: config.clone(),
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            params,
            running,
            step: 0,
            epoch: 0,
        })
    }

    /// [`ParamState::init`] with a ChaCha8 stream seeded from `config.seed`.
    pub fn seeded(widths: &[usize], config: &TrainConfig) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        Self::init(widths, config, &mut rng)
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    /// One Adam update. Weights are clipped to the straight-through range
    /// afterwards, as is usual for sign-binarized shadow weights.
    pub fn apply(&mut self, grads: &Params) {
        let c = &self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = c.learning_rate;
        let trained_gamma = c.weight_gamma == WeightGammaMode::Trained;
        let groups = self.params.groups_mut();
        let m_groups = self.first_moment.groups_mut();
        let v_groups = self.second_moment.groups_mut();
        let g_groups = grads.groups();
        for (k, (((p, m), v), g)) in groups
            .into_iter()
            .zip(m_groups)
            .zip(v_groups)
            .zip(g_groups)
            .enumerate()
        {
            // weight_gamma groups sit at index 1 of each four-group layer block
            let is_weight_gamma = k < 4 * self.widths.len().saturating_sub(1) && k % 4 == 1;
            if is_weight_gamma && !trained_gamma {
                continue;
            }
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.adam_epsilon);
            }
        }
        let clip = c.clip;
        for l in &mut self.params.layers {
            l.weights.mapv_inplace(|w| w.clamp(-clip, clip));
        }
        if !trained_gamma {
            for l in &mut self.params.layers {
                l.weight_gamma = l.weights.iter().map(|w| w.abs()).sum::<f64>() / l.weights.len() as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TrainConfig {
            levels: 3,
            ..Default::default()
        };
        let s = ParamState::init(&[4, 5, 6, 2], &cfg, &mut rng).unwrap();
        assert_eq!(s.params.layers.len(), 3);
        assert_eq!(s.params.layers[0].weights.dim(), (5, 4));
        assert_eq!(s.params.gammas.len(), 2);
        assert_eq!(s.params.gammas[0].to_vec(), vec![1.0, 0.5, 0.25]);
        assert_eq!(s.params.len(), 5 * 4 + 6 * 5 + 2 * 6 + 3 + 2 * (5 + 6 + 2) + 6);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn checksum_tracks_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamState::init(&[3, 2], &TrainConfig::default(), &mut rng).unwrap();
        let before = s.params.checksum();
        s.params.layers[0].bn_bias[0] = 1e-300;
        assert_ne!(before, s.params.checksum());
    }
}
