use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{backward_impl, forward_impl, Anchor};
use super::{LayerParams, Params, TrainConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub widths: Vec<usize>,
    pub levels: usize,
    pub batch: usize,
    pub points: usize,
    pub epsilon: f64,
    /// Minimum distance of every residual and weight from the clip bound.
    pub margin: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            widths: vec![4, 2, 2],
            levels: 2,
            batch: 8,
            points: 100,
            epsilon: 1e-4,
            margin: 1e-2,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub points: usize,
    pub rejected: usize,
    pub parameters_per_point: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn random_params(widths: &[usize], levels: usize, rng: &mut ChaCha8Rng) -> Params {
    let layers = widths
        .windows(2)
        .map(|p| LayerParams {
            weights: Array2::from_shape_fn((p[1], p[0]), |_| rng.gen_range(-1.5..1.5)),
            weight_gamma: rng.gen_range(0.5..1.5),
            bn_gain: Array1::from_shape_fn(p[1], |_| rng.gen_range(0.5..1.5)),
            bn_bias: Array1::from_shape_fn(p[1], |_| rng.gen_range(-0.5..0.5)),
        })
        .collect();
    let gammas = (0..widths.len() - 2)
        .map(|_| {
            let mut g = rng.gen_range(0.5..1.5);
            Array1::from_shape_fn(levels, |_| {
                let out = g;
                g *= rng.gen_range(0.3..0.7);
                out
            })
        })
        .collect();
    Params { layers, gammas }
}

/// Compares the straight-through backward pass with central differences of
/// the loss at random points.
///
/// Signs are frozen at each sampled point and every sign is replaced by
/// `s⁰ + htanh(v) − htanh(v⁰)`, so the differentiated function agrees with
/// the binary network at the point and its true derivative is the
/// straight-through gradient. Points where any residual or weight lies within
/// `margin` of the clip bound are resampled.
pub fn gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.widths.len() < 2 || config.widths.contains(&0) || config.batch < 2 {
        return Err(Error::input("gradcheck needs at least one layer and a batch of two"));
    }
    if !(config.epsilon > 0.0) || !(config.floor > 0.0) {
        return Err(Error::input("epsilon and floor must be positive"));
    }
    let train = TrainConfig {
        levels: config.levels,
        ..Default::default()
    };
    train.validate()?;
    let clip = train.clip;
    let classes = *config.widths.last().expect("checked");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradcheckReport {
        points: 0,
        rejected: 0,
        parameters_per_point: 0,
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
    };
    let max_attempts = config.points.saturating_mul(1000).max(1000);
    while report.points < config.points {
        if report.points + report.rejected >= max_attempts {
            return Err(Error::Numeric(format!(
                "only {} of {} points found away from the clip bound",
                report.points, config.points
            )));
        }
        let params = random_params(&config.widths, config.levels, &mut rng);
        let x = Array2::from_shape_fn((config.batch, config.widths[0]), |_| rng.gen_range(-2.0..2.0));
        let labels: Vec<usize> = (0..config.batch).map(|_| rng.gen_range(0..classes)).collect();
        let weight_margin = params
            .layers
            .iter()
            .flat_map(|l| l.weights.iter())
            .map(|w| (w.abs() - clip).abs())
            .fold(f64::INFINITY, f64::min);
        let cache = forward_impl(&params, &train, &x, &labels, None)?;
        if weight_margin < config.margin || cache.residual_margin(clip) < config.margin {
            report.rejected += 1;
            continue;
        }
        let analytic = backward_impl(&params, &train, &cache);
        let anchor = Anchor::new(&params, &cache);
        let loss_at = |p: &Params| forward_impl(p, &train, &x, &labels, Some(&anchor)).map(|c| c.loss);
        let analytic_flat: Vec<f64> = analytic.groups().into_iter().flatten().copied().collect();
        report.parameters_per_point = analytic_flat.len();
        for (k, &a) in analytic_flat.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            *flat_mut(&mut plus, k) += config.epsilon;
            *flat_mut(&mut minus, k) -= config.epsilon;
            let n = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * config.epsilon);
            report.max_relative_error = report.max_relative_error.max(relative_error(a, n, config.floor));
            report.max_absolute_error = report.max_absolute_error.max((a - n).abs());
        }
        report.points += 1;
    }
    Ok(report)
}

fn flat_mut(p: &mut Params, mut k: usize) -> &mut f64 {
    for g in p.groups_mut() {
        if k < g.len() {
            return &mut g[k];
        }
        k -= g.len();
    }
    panic!("parameter index out of range")
}
