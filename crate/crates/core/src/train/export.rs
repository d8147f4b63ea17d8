use serde::Serialize;

use super::ParamState;
use crate::bitcore::BitVector;
use crate::error::{Error, Result};
use crate::fixed::FixedPointFormat;
use crate::netgraph::{fold_batchnorm, BatchNorm, DenseLayer, Layer, Model, Parallelism, Shape};
use crate::residual::ScalingFactors;

#[derive(Clone, Debug)]
pub struct ExportReport {
    pub model: Model,
    pub diagnostics: ExportDiagnostics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExportDiagnostics {
    /// Per activation layer: whether γ is superincreasing after rounding.
    pub superincreasing: Vec<bool>,
    /// `(layer, neuron)` pairs whose folded scale is negative; only flagged
    /// for single-level models, where the threshold comparator is fixed.
    pub negative_alpha: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

/// Binarizes weights and folds weight scale plus population batch-norm into
/// one `(α, β)` per neuron, all rounded onto `format`.
///
/// With `s = sqrt(var + ε)` the folded parameters are
/// `α = g·γ_w/s` and `β = g·μ/s − b`, and exported weight scales are 1.
pub fn export(
    state: &ParamState,
    name: &str,
    parallelism: &[Parallelism],
    format: FixedPointFormat,
) -> Result<ExportReport> {
    format.validate()?;
    let n = state.params.layers.len();
    if parallelism.len() != n {
        return Err(Error::input(format!("{} parallelism entries for {n} layers", parallelism.len())));
    }
    let mut diag = ExportDiagnostics::default();
    let mut layers = Vec::with_capacity(3 * n);
    for (l, lp) in state.params.layers.iter().enumerate() {
        let (out_features, in_features) = lp.weights.dim();
        if lp.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric(format!("layer {l} has non-finite weights")));
        }
        let weights = lp
            .weights
            .rows()
            .into_iter()
            .map(|r| BitVector::from_reals(&r.to_vec()))
            .collect();
        layers.push(Layer::Dense(DenseLayer {
            in_features,
            out_features,
            weights,
            weight_gamma: 1.0,
            parallelism: parallelism[l],
        }));
        let stats = &state.running[l];
        let mut alpha = Vec::with_capacity(out_features);
        let mut beta = Vec::with_capacity(out_features);
        for j in 0..out_features {
            let s = (stats.var[j] + state.config.bn_epsilon).sqrt();
            let g = lp.bn_gain[j];
            let a = format.quantize(g * lp.weight_gamma / s);
            let b = format.quantize(g * stats.mean[j] / s - lp.bn_bias[j]);
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::Numeric(format!("layer {l} neuron {j}: non-finite batch norm")));
            }
            if a == 0.0 && l + 1 < n && state.levels() == 1 {
                // a single-level threshold needs a nonzero scale
                return Err(Error::Fold(format!("layer {l} neuron {j}: folded scale rounds to zero")));
            } else if a == 0.0 {
                diag.warnings
                    .push(format!("layer {l} neuron {j}: folded scale rounds to zero"));
            } else if l + 1 < n && state.levels() == 1 && fold_batchnorm(a, b)?.negative_alpha {
                diag.negative_alpha.push((l, j));
            }
            alpha.push(a);
            beta.push(b);
        }
        layers.push(Layer::BatchNorm(BatchNorm { alpha, beta }));
        if l + 1 < n {
            let gammas: Vec<f64> = state.params.gammas[l].iter().map(|&g| format.quantize(g)).collect();
            let sf = ScalingFactors::new(gammas).map_err(|e| {
                Error::Numeric(format!("layer {l}: activation scales not exportable: {e}"))
            })?;
            if !sf.is_superincreasing() {
                diag.warnings.push(format!(
                    "layer {l}: scaling factors {:?} are not superincreasing",
                    sf.gammas()
                ));
            }
            diag.superincreasing.push(sf.is_superincreasing());
            layers.push(Layer::ResidualActivation(sf));
        } else {
            layers.push(Layer::Softmax);
        }
    }
    let model = Model {
        name: name.to_string(),
        input: Shape::vector(state.widths[0]),
        levels: state.levels(),
        format,
        layers,
    };
    model.validate()?;
    Ok(ExportReport { model, diagnostics: diag })
}
