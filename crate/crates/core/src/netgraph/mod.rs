//! Layer graph of a residual-binarized network and the reference forward
//! pass used as the correctness oracle for the accelerator simulator.

mod arch;
pub(crate) mod forward;
pub mod random;

pub use arch::{arch1, arch2, dense_topology, ARCH1_PARALLELISM};
pub use forward::{
    argmax, conv_forward, dense_forward, maxpool_forward, normalize, reference_forward,
    residual_activation, CodeMap, Features,
};

use serde::{Deserialize, Serialize};

use crate::bitcore::BitVector;
use crate::error::{Error, Result};
use crate::fixed::FixedPointFormat;
use crate::residual::ScalingFactors;

/// Spatial shape of a feature map, stored height-major with channels
/// innermost (`index = (y * width + x) * channels + c`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape {
            height,
            width,
            channels,
        }
    }

    pub const fn vector(len: usize) -> Self {
        Shape::new(1, 1, len)
    }

    #[inline]
    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }
}

/// MVTU parallelism: `pe` output neurons in parallel, `simd` synapses per
/// PE per cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Parallelism {
    pub pe: usize,
    pub simd: usize,
}

impl Parallelism {
    pub const fn new(pe: usize, simd: usize) -> Self {
        Parallelism { pe, simd }
    }
}

impl Default for Parallelism {
    fn default() -> Self {
        Parallelism::new(1, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub in_features: usize,
    pub out_features: usize,
    /// One packed sign row per output neuron.
    pub weights: Vec<BitVector>,
    pub weight_gamma: f64,
    pub parallelism: Parallelism,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// One row per output channel, `kernel * kernel * in_channels` long,
    /// ordered `(ky, kx, c)` with `c` fastest.
    pub weights: Vec<BitVector>,
    pub weight_gamma: f64,
    pub parallelism: Parallelism,
}

impl ConvLayer {
    pub fn window_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.height < self.kernel || input.width < self.kernel {
            return Err(Error::Geometry(format!(
                "{}x{} window does not fit a {}x{} input",
                self.kernel, self.kernel, input.height, input.width
            )));
        }
        Ok(Shape::new(
            (input.height - self.kernel) / self.stride + 1,
            (input.width - self.kernel) / self.stride + 1,
            self.out_channels,
        ))
    }
}

/// Inference-form batch normalization `y' = α·y − β`, per output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
    BatchNorm(BatchNorm),
    ResidualActivation(ScalingFactors),
    MaxPool { window: usize },
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::ResidualActivation(_) => "residual_activation",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Softmax => "softmax",
        }
    }
}

/// A trained, binarized network ready for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub name: String,
    pub input: Shape,
    /// Residual levels used by every activation layer.
    pub levels: usize,
    pub format: FixedPointFormat,
    pub layers: Vec<Layer>,
}

/// Threshold obtained by folding a batch-norm into a sign activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub value: f64,
    /// With `α < 0` the comparison direction flips; single-level hardware
    /// that only compares `y ≥ τ` cannot express it.
    pub negative_alpha: bool,
}

/// Folds `Sign(α·y − β)` into `Sign(y − β/α)`.
pub fn fold_batchnorm(alpha: f64, beta: f64) -> Result<Threshold> {
    if alpha == 0.0 || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::Fold(format!(
            "cannot fold batch norm with alpha = {alpha}, beta = {beta}"
        )));
    }
    Ok(Threshold {
        value: beta / alpha,
        negative_alpha: alpha < 0.0,
    })
}

/// Sign rows of a real weight matrix plus its scale.
///
/// The scale is `trained_gamma` when given, otherwise `mean |W|`.
pub fn binarize_weights(w: &[Vec<f64>], trained_gamma: Option<f64>) -> Result<(Vec<BitVector>, f64)> {
    let cols = w.first().map_or(0, Vec::len);
    if w.is_empty() || cols == 0 {
        return Err(Error::input("cannot binarize an empty weight matrix"));
    }
    if w.iter().any(|r| r.len() != cols) {
        return Err(Error::shape("ragged weight matrix"));
    }
    if w.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::input("weight matrix has non-finite entries"));
    }
    let rows = w.iter().map(|r| BitVector::from_reals(r)).collect();
    let gamma = match trained_gamma {
        Some(g) => g,
        None => w.iter().flatten().map(|v| v.abs()).sum::<f64>() / (w.len() * cols) as f64,
    };
    Ok((rows, gamma))
}

/// What flows between layers, tracked during validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    /// Fixed-point network input.
    Input(Shape),
    /// Real-valued matrix-vector results, before normalization.
    Accumulated(Shape),
    /// Normalized values awaiting an activation.
    Normalized(Shape),
    /// Residual-binarized codes.
    Codes(Shape),
    /// Class scores after the final softmax marker.
    Scores(usize),
}

impl Model {
    /// Checks layer composition and returns the signal after every layer.
    pub fn validate(&self) -> Result<Vec<Signal>> {
        self.format.validate()?;
        if self.input.is_empty() {
            return Err(Error::model("empty input shape"));
        }
        if self.levels == 0 || self.levels > crate::residual::MAX_LEVELS {
            return Err(Error::model(format!("unsupported level count {}", self.levels)));
        }
        let mut signal = Signal::Input(self.input);
        let mut signals = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::model(format!("layer {i} ({}): {msg}", layer.kind()));
            signal = match (layer, signal) {
                (Layer::Dense(d), Signal::Input(s) | Signal::Codes(s)) => {
                    if d.in_features != s.len() {
                        return Err(bad(format!("expects {} inputs, got {}", d.in_features, s.len())));
                    }
                    check_rows(&d.weights, d.out_features, d.in_features).map_err(bad)?;
                    check_parallelism(d.parallelism).map_err(bad)?;
                    check_gamma(d.weight_gamma).map_err(bad)?;
                    Signal::Accumulated(Shape::vector(d.out_features))
                }
                (Layer::Conv(c), Signal::Input(s) | Signal::Codes(s)) => {
                    if c.kernel == 0 || c.stride == 0 {
                        return Err(bad("kernel and stride must be at least 1".into()));
                    }
                    if c.in_channels != s.channels {
                        return Err(bad(format!("expects {} channels, got {}", c.in_channels, s.channels)));
                    }
                    check_rows(&c.weights, c.out_channels, c.window_len()).map_err(bad)?;
                    check_parallelism(c.parallelism).map_err(bad)?;
                    check_gamma(c.weight_gamma).map_err(bad)?;
                    Signal::Accumulated(c.output_shape(s).map_err(|e| bad(e.to_string()))?)
                }
                (Layer::BatchNorm(bn), Signal::Accumulated(s)) => {
                    if bn.alpha.len() != s.channels || bn.beta.len() != s.channels {
                        return Err(bad(format!("needs {} channels of alpha/beta", s.channels)));
                    }
                    Signal::Normalized(s)
                }
                (Layer::ResidualActivation(sf), Signal::Normalized(s)) => {
                    if sf.levels() != self.levels {
                        return Err(bad(format!("has {} levels, model uses {}", sf.levels(), self.levels)));
                    }
                    Signal::Codes(s)
                }
                (Layer::MaxPool { window }, Signal::Codes(s)) => {
                    if *window == 0 || s.height % window != 0 || s.width % window != 0 {
                        return Err(Error::Geometry(format!(
                            "layer {i}: {}x{} map is not divisible by pooling window {window}",
                            s.height, s.width
                        )));
                    }
                    Signal::Codes(Shape::new(s.height / window, s.width / window, s.channels))
                }
                (Layer::Softmax, Signal::Normalized(s)) => Signal::Scores(s.len()),
                (_, sig) => return Err(bad(format!("cannot follow {sig:?}"))),
            };
            signals.push(signal);
        }
        match signal {
            Signal::Scores(_) => Ok(signals),
            _ => Err(Error::model("model must end with batchnorm followed by softmax")),
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        match self.validate()?.last() {
            Some(Signal::Scores(n)) => Ok(*n),
            _ => unreachable!("validate guarantees a score output"),
        }
    }

    /// Activation scaling factors in layer order.
    pub fn activations(&self) -> impl Iterator<Item = &ScalingFactors> {
        self.layers.iter().filter_map(|l| match l {
            Layer::ResidualActivation(sf) => Some(sf),
            _ => None,
        })
    }

    /// True when every activation layer can use the code comparator for
    /// max-pooling.
    pub fn all_superincreasing(&self) -> bool {
        self.activations().all(ScalingFactors::is_superincreasing)
    }

    /// Checks that every real parameter sits on the fixed-point grid, which
    /// the simulator relies on for bit-exact agreement with the reference.
    pub fn check_quantized(&self) -> Result<()> {
        let f = self.format;
        let check = |what: &str, v: f64| {
            if f.is_representable(v) {
                Ok(())
            } else {
                Err(Error::model(format!(
                    "{what} = {v} is not representable in Q{}.{}",
                    f.total_bits - f.fraction_bits,
                    f.fraction_bits
                )))
            }
        };
        for layer in &self.layers {
            match layer {
                Layer::Dense(DenseLayer { weight_gamma, .. })
                | Layer::Conv(ConvLayer { weight_gamma, .. }) => check("weight gamma", *weight_gamma)?,
                Layer::BatchNorm(bn) => {
                    for (&a, &b) in bn.alpha.iter().zip(&bn.beta) {
                        check("alpha", a)?;
                        check("beta", b)?;
                    }
                }
                Layer::ResidualActivation(sf) => {
                    for &g in sf.gammas() {
                        check("gamma", g)?;
                    }
                }
                Layer::MaxPool { .. } | Layer::Softmax => {}
            }
        }
        Ok(())
    }
}

fn check_rows(rows: &[BitVector], count: usize, len: usize) -> std::result::Result<(), String> {
    if rows.len() != count {
        return Err(format!("has {} weight rows, expected {count}", rows.len()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != len) {
        return Err(format!("weight row of length {}, expected {len}", r.len()));
    }
    Ok(())
}

fn check_parallelism(p: Parallelism) -> std::result::Result<(), String> {
    if p.pe == 0 || p.simd == 0 || p.simd > crate::bitcore::WORD_BITS {
        return Err(format!(
            "parallelism (P={}, S={}) must have P >= 1 and 1 <= S <= 64",
            p.pe, p.simd
        ));
    }
    Ok(())
}

fn check_gamma(g: f64) -> std::result::Result<(), String> {
    if !g.is_finite() {
        return Err(format!("weight gamma {g} is not finite"));
    }
    Ok(())
}
