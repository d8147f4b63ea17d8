//! Reference inference, computed on reconstructed values in `f64`.
//!
//! Every parameter of an exported model lies on the fixed-point grid, and
//! normalized features are rounded back onto it, so these sums are exact in
//! `f64`. The accelerator simulator reproduces them with integer arithmetic.

use crate::bitcore::{BitVector, WORD_BITS};
use crate::error::{Error, Result};
use crate::fixed::FixedPointFormat;
use crate::residual::{self, pool_max, ResidualEncoding, ScalingFactors};

use super::{BatchNorm, ConvLayer, DenseLayer, Layer, Model, Shape};

/// Input to a matrix-vector layer.
#[derive(Clone, Copy, Debug)]
pub enum Features<'a> {
    /// Fixed-point values (the network input).
    Fixed(&'a [f64]),
    /// Residual-binarized features with their scaling factors.
    Encoded(&'a ResidualEncoding, &'a ScalingFactors),
}

impl Features<'_> {
    pub fn len(&self) -> usize {
        match self {
            Features::Fixed(x) => x.len(),
            Features::Encoded(enc, _) => enc.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A feature map of residual codes.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMap {
    pub shape: Shape,
    pub enc: ResidualEncoding,
}

/// `Σ_i x_i · s_i` for fixed-point `x` against a packed sign row.
fn signed_sum(x: &[f64], row: &BitVector) -> f64 {
    let mut acc = 0.0;
    for (chunk, &word) in x.chunks(WORD_BITS).zip(row.words()) {
        for (k, &v) in chunk.iter().enumerate() {
            if (word >> k) & 1 == 1 {
                acc += v;
            } else {
                acc -= v;
            }
        }
    }
    acc
}

fn row_dot(features: Features<'_>, row: &BitVector, gamma_w: f64) -> Result<f64> {
    match features {
        Features::Fixed(x) => {
            if x.len() != row.len() {
                return Err(Error::shape(format!(
                    "{} inputs against a weight row of {}",
                    x.len(),
                    row.len()
                )));
            }
            Ok(gamma_w * signed_sum(x, row))
        }
        Features::Encoded(enc, sf) => residual::multi_level_dot(enc, row, sf, gamma_w),
    }
}

/// One dot product per output neuron.
pub fn dense_forward(features: Features<'_>, layer: &DenseLayer) -> Result<Vec<f64>> {
    if features.len() != layer.in_features {
        return Err(Error::shape(format!(
            "dense layer expects {} inputs, got {}",
            layer.in_features,
            features.len()
        )));
    }
    layer
        .weights
        .iter()
        .map(|row| row_dot(features, row, layer.weight_gamma))
        .collect()
}

/// Flat input indices of the window whose top-left output position is
/// `(oy, ox)`, ordered `(ky, kx, c)`.
pub(crate) fn window_indices(
    shape: Shape,
    kernel: usize,
    stride: usize,
    oy: usize,
    ox: usize,
) -> impl Iterator<Item = usize> {
    (0..kernel).flat_map(move |ky| {
        (0..kernel).flat_map(move |kx| {
            let base = shape.index(oy * stride + ky, ox * stride + kx, 0);
            base..base + shape.channels
        })
    })
}

/// Convolution lowered to dense products over materialized windows.
pub fn conv_forward(
    features: Features<'_>,
    shape: Shape,
    layer: &ConvLayer,
) -> Result<(Vec<f64>, Shape)> {
    if features.len() != shape.len() {
        return Err(Error::shape(format!(
            "feature map has {} values, shape {:?} needs {}",
            features.len(),
            shape,
            shape.len()
        )));
    }
    if shape.channels != layer.in_channels {
        return Err(Error::shape(format!(
            "conv expects {} channels, got {}",
            layer.in_channels, shape.channels
        )));
    }
    let out = layer.output_shape(shape)?;
    let mut y = Vec::with_capacity(out.len());
    for oy in 0..out.height {
        for ox in 0..out.width {
            let idx: Vec<usize> = window_indices(shape, layer.kernel, layer.stride, oy, ox).collect();
            match features {
                Features::Fixed(x) => {
                    let window: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
                    for row in &layer.weights {
                        y.push(row_dot(Features::Fixed(&window), row, layer.weight_gamma)?);
                    }
                }
                Features::Encoded(enc, sf) => {
                    let planes = enc
                        .levels()
                        .iter()
                        .map(|p| BitVector::from_fn(idx.len(), |t| p.get(idx[t])))
                        .collect();
                    let window = ResidualEncoding::from_levels(planes)?;
                    for row in &layer.weights {
                        y.push(row_dot(Features::Encoded(&window, sf), row, layer.weight_gamma)?);
                    }
                }
            }
        }
    }
    Ok((y, out))
}

/// Non-overlapping max-pooling over codes.
///
/// Single-level maps with a positive scale use a bitwise OR. Otherwise codes
/// are compared directly when the scales are superincreasing, and by
/// reconstructed value when they are not.
pub fn maxpool_forward(input: &CodeMap, window: usize, sf: &ScalingFactors) -> Result<CodeMap> {
    let s = input.shape;
    if window == 0 || s.height % window != 0 || s.width % window != 0 {
        return Err(Error::Geometry(format!(
            "{}x{} map is not divisible by pooling window {window}",
            s.height, s.width
        )));
    }
    if input.enc.level_count() != sf.levels() {
        return Err(Error::shape("code levels do not match scaling factors"));
    }
    let out = Shape::new(s.height / window, s.width / window, s.channels);
    let sources = |oy: usize, ox: usize, c: usize| {
        (0..window).flat_map(move |dy| {
            (0..window).map(move |dx| s.index(oy * window + dy, ox * window + dx, c))
        })
    };
    let position = |j: usize| {
        let c = j % out.channels;
        let ox = (j / out.channels) % out.width;
        let oy = j / (out.channels * out.width);
        (oy, ox, c)
    };

    let enc = if sf.levels() == 1 && sf.is_superincreasing() {
        let plane = &input.enc.levels()[0];
        let pooled = BitVector::from_fn(out.len(), |j| {
            let (oy, ox, c) = position(j);
            sources(oy, ox, c).any(|i| plane.get(i))
        });
        ResidualEncoding::from_levels(vec![pooled])?
    } else {
        let mut codes = Vec::with_capacity(out.len());
        for j in 0..out.len() {
            let (oy, ox, c) = position(j);
            let window_codes: Vec<_> = sources(oy, ox, c).map(|i| input.enc.code(i)).collect();
            codes.push(pool_max(&window_codes, sf)?);
        }
        ResidualEncoding::from_codes(&codes, sf.levels())?
    };
    Ok(CodeMap { shape: out, enc })
}

/// `y' = α_c·y − β_c` per channel, rounded onto the fixed-point grid.
pub fn normalize(
    y: &[f64],
    channels: usize,
    bn: &BatchNorm,
    format: &FixedPointFormat,
) -> Result<Vec<f64>> {
    if channels == 0 || y.len() % channels != 0 || bn.alpha.len() != channels || bn.beta.len() != channels {
        return Err(Error::shape(format!(
            "batch norm over {} channels applied to {} values",
            bn.alpha.len(),
            y.len()
        )));
    }
    Ok(y
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let c = j % channels;
            format.quantize(bn.alpha[c] * v - bn.beta[c])
        })
        .collect())
}

/// Affine normalization followed by residual encoding.
pub fn residual_activation(
    y: &[f64],
    channels: usize,
    bn: &BatchNorm,
    sf: &ScalingFactors,
    format: &FixedPointFormat,
) -> Result<ResidualEncoding> {
    residual::encode(&normalize(y, channels, bn, format)?, sf)
}

enum Flow {
    Input(Vec<f64>, Shape),
    Accumulated(Vec<f64>, Shape),
    Normalized(Vec<f64>, Shape),
    Codes(CodeMap, ScalingFactors),
}

/// Full inference pass; returns the fixed-point class scores.
///
/// `input` is laid out like [`Shape::index`] and is first rounded onto the
/// model's fixed-point grid.
pub fn reference_forward(model: &Model, input: &[f64]) -> Result<Vec<f64>> {
    model.validate()?;
    if input.len() != model.input.len() {
        return Err(Error::shape(format!(
            "model expects {} input values, got {}",
            model.input.len(),
            input.len()
        )));
    }
    let fmt = model.format;
    let x: Vec<f64> = input.iter().map(|&v| fmt.quantize(v)).collect();
    let mut flow = Flow::Input(x, model.input);
    for layer in &model.layers {
        flow = match (layer, flow) {
            (Layer::Dense(d), Flow::Input(x, _)) => {
                Flow::Accumulated(dense_forward(Features::Fixed(&x), d)?, Shape::vector(d.out_features))
            }
            (Layer::Dense(d), Flow::Codes(map, sf)) => Flow::Accumulated(
                dense_forward(Features::Encoded(&map.enc, &sf), d)?,
                Shape::vector(d.out_features),
            ),
            (Layer::Conv(c), Flow::Input(x, s)) => {
                let (y, out) = conv_forward(Features::Fixed(&x), s, c)?;
                Flow::Accumulated(y, out)
            }
            (Layer::Conv(c), Flow::Codes(map, sf)) => {
                let (y, out) = conv_forward(Features::Encoded(&map.enc, &sf), map.shape, c)?;
                Flow::Accumulated(y, out)
            }
            (Layer::BatchNorm(bn), Flow::Accumulated(y, s)) => {
                Flow::Normalized(normalize(&y, s.channels, bn, &fmt)?, s)
            }
            (Layer::ResidualActivation(sf), Flow::Normalized(y, s)) => Flow::Codes(
                CodeMap {
                    shape: s,
                    enc: residual::encode(&y, sf)?,
                },
                sf.clone(),
            ),
            (Layer::MaxPool { window }, Flow::Codes(map, sf)) => {
                Flow::Codes(maxpool_forward(&map, *window, &sf)?, sf)
            }
            (Layer::Softmax, Flow::Normalized(scores, _)) => return Ok(scores),
            _ => unreachable!("layer order checked by validate"),
        };
    }
    unreachable!("validate guarantees a terminal softmax")
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
