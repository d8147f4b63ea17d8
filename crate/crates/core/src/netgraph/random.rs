//! Random grid-aligned models for fuzzing and equivalence tests.

use rand::Rng;

use crate::bitcore::BitVector;
use crate::error::Result;
use crate::fixed::FixedPointFormat;
use crate::residual::ScalingFactors;

use super::{BatchNorm, ConvLayer, DenseLayer, Layer, Model, Parallelism, Shape};

/// Bounds for [`random_model`].
#[derive(Clone, Copy, Debug)]
pub struct RandomSpec {
    pub max_layers: usize,
    pub max_dim: usize,
    pub max_levels: usize,
    /// Allow a convolutional front end on a small feature map.
    pub conv: bool,
}

impl Default for RandomSpec {
    fn default() -> Self {
        RandomSpec {
            max_layers: 4,
            max_dim: 64,
            max_levels: 3,
            conv: true,
        }
    }
}

fn grid(rng: &mut impl Rng, f: &FixedPointFormat, lo: f64, hi: f64) -> f64 {
    f.quantize(rng.gen_range(lo..hi))
}

fn gammas(rng: &mut impl Rng, f: &FixedPointFormat, levels: usize) -> ScalingFactors {
    let superincreasing = rng.gen_bool(0.5);
    let mut g = grid(rng, f, 0.25, 2.0);
    let mut out = Vec::with_capacity(levels);
    for _ in 0..levels {
        out.push(g);
        let ratio = if superincreasing {
            rng.gen_range(0.1..0.45)
        } else {
            rng.gen_range(0.5..1.1)
        };
        g = f.quantize(g * ratio).max(f.from_raw(1));
    }
    ScalingFactors::new(out).expect("positive finite scales")
}

fn batchnorm(rng: &mut impl Rng, f: &FixedPointFormat, n: usize) -> Layer {
    Layer::BatchNorm(BatchNorm {
        alpha: (0..n)
            .map(|_| {
                let a = grid(rng, f, 0.05, 2.0);
                if rng.gen_bool(0.2) {
                    -a
                } else {
                    a
                }
            })
            .collect(),
        beta: (0..n).map(|_| grid(rng, f, -2.0, 2.0)).collect(),
    })
}

fn parallelism(rng: &mut impl Rng, rows: usize, cols: usize) -> Parallelism {
    Parallelism::new(rng.gen_range(1..=rows), rng.gen_range(1..=cols.min(64)))
}

fn sign_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<BitVector> {
    (0..rows).map(|_| BitVector::from_fn(cols, |_| rng.gen_bool(0.5))).collect()
}

fn weight_gamma(rng: &mut impl Rng) -> f64 {
    2f64.powi(rng.gen_range(-2..=1))
}

/// A valid model whose parameters all sit on the default fixed-point grid.
///
/// Weight scales are powers of two and magnitudes stay small, so the
/// floating-point reference path computes every intermediate exactly.
pub fn random_model(rng: &mut impl Rng, spec: RandomSpec) -> Result<Model> {
    let f = FixedPointFormat::default();
    let levels = rng.gen_range(1..=spec.max_levels.max(1));
    let mvtu_layers = rng.gen_range(1..=spec.max_layers.max(1));
    let max_dim = spec.max_dim.max(2);
    let mut layers = Vec::new();
    let mut remaining = mvtu_layers;
    let input;
    let mut shape;
    if spec.conv && rng.gen_bool(0.5) && mvtu_layers >= 2 {
        let side = rng.gen_range(3..=6);
        let channels = rng.gen_range(1..=3);
        input = Shape::new(side, side, channels);
        shape = input;
        let convs = rng.gen_range(1..mvtu_layers);
        for _ in 0..convs {
            let kernel = rng.gen_range(1..=shape.height.min(3));
            let out = rng.gen_range(1..=8);
            let c = ConvLayer {
                kernel,
                stride: 1,
                in_channels: shape.channels,
                out_channels: out,
                weights: sign_rows(rng, out, kernel * kernel * shape.channels),
                weight_gamma: weight_gamma(rng),
                parallelism: parallelism(rng, out, kernel * kernel * shape.channels),
            };
            shape = c.output_shape(shape)?;
            layers.push(Layer::Conv(c));
            layers.push(batchnorm(rng, &f, out));
            layers.push(Layer::ResidualActivation(gammas(rng, &f, levels)));
            if shape.height % 2 == 0 && shape.width % 2 == 0 && rng.gen_bool(0.5) {
                layers.push(Layer::MaxPool { window: 2 });
                shape = Shape::new(shape.height / 2, shape.width / 2, shape.channels);
            }
            remaining -= 1;
        }
    } else {
        input = Shape::vector(rng.gen_range(1..=max_dim));
        shape = input;
    }
    for k in 0..remaining {
        let cols = shape.len();
        let last = k + 1 == remaining;
        let rows = if last { rng.gen_range(2..=10) } else { rng.gen_range(1..=max_dim) };
        layers.push(Layer::Dense(DenseLayer {
            in_features: cols,
            out_features: rows,
            weights: sign_rows(rng, rows, cols),
            weight_gamma: weight_gamma(rng),
            parallelism: parallelism(rng, rows, cols),
        }));
        layers.push(batchnorm(rng, &f, rows));
        if last {
            layers.push(Layer::Softmax);
        } else {
            layers.push(Layer::ResidualActivation(gammas(rng, &f, levels)));
        }
        shape = Shape::vector(rows);
    }
    let model = Model {
        name: "random".into(),
        input,
        levels,
        format: f,
        layers,
    };
    model.validate()?;
    Ok(model)
}

/// Random input on the grid of `model`'s format, in `[-2, 2)`.
pub fn random_input(rng: &mut impl Rng, model: &Model) -> Vec<f64> {
    (0..model.input.len())
        .map(|_| grid(rng, &model.format, -2.0, 2.0))
        .collect()
}
