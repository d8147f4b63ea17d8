use ndarray::{Array1, Array2, Axis};

use super::{LayerParams, ParamState, Params, TrainConfig};
use crate::bitcore::Sign;
use crate::error::{Error, Result};

fn sign(x: f64) -> f64 {
    Sign::of(x).as_f64()
}

fn htanh(x: f64, clip: f64) -> f64 {
    x.clamp(-clip, clip)
}

/// `∂L/∂γ_i` contribution of one element: the upstream gradient times the
/// sign of the residual at that level.
pub fn grad_gamma(upstream: f64, residual: f64) -> f64 {
    upstream * sign(residual)
}

/// `∂L/∂x` of one element through the residual encoder.
pub fn grad_input(upstream: f64, gammas: &[f64], residuals: &[f64], clip: f64) -> f64 {
    let pass: f64 = gammas
        .iter()
        .zip(residuals)
        .filter(|(_, r)| r.abs() <= clip)
        .map(|(g, _)| g)
        .sum();
    upstream * pass
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    pub input: Array2<f64>,
    pub binarized: Array2<f64>,
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct ActCache {
    /// Encoder input `y`.
    pub pre: Array2<f64>,
    /// `r_i` per level.
    pub residuals: Vec<Array2<f64>>,
    /// `Sign(r_i)` per level, as ±1.
    pub signs: Vec<Array2<f64>>,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct Cache {
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) acts: Vec<ActCache>,
    pub(crate) probs: Array2<f64>,
    pub(crate) labels: Vec<usize>,
    pub(crate) step: u64,
    pub loss: f64,
}

impl Cache {
    pub fn probabilities(&self) -> &Array2<f64> {
        &self.probs
    }

    /// Encoder inputs of each hidden layer.
    pub fn pre_activations(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.acts.iter().map(|a| &a.pre)
    }

    pub fn batch_stats(&self) -> impl Iterator<Item = (&Array1<f64>, &Array1<f64>)> {
        self.layers.iter().map(|l| (&l.mean, &l.var))
    }

    /// Smallest distance of any residual to the clip bound.
    pub(crate) fn residual_margin(&self, clip: f64) -> f64 {
        self.acts
            .iter()
            .flat_map(|a| a.residuals.iter())
            .flat_map(|r| r.iter())
            .map(|r| (r.abs() - clip).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Signs frozen at an anchor point. Evaluating the network with an anchor
/// replaces each sign by `s⁰ + htanh(v) − htanh(v⁰)`, a piecewise-linear
/// function that equals the binary forward at the anchor and whose exact
/// derivative is the straight-through rule.
pub(crate) struct Anchor {
    weights: Vec<Array2<f64>>,
    weight_signs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    act_signs: Vec<Vec<Array2<f64>>>,
}

impl Anchor {
    pub fn new(params: &Params, cache: &Cache) -> Self {
        Anchor {
            weights: params.layers.iter().map(|l| l.weights.clone()).collect(),
            weight_signs: params.layers.iter().map(|l| l.weights.mapv(sign)).collect(),
            pre: cache.acts.iter().map(|a| a.pre.clone()).collect(),
            act_signs: cache.acts.iter().map(|a| a.signs.clone()).collect(),
        }
    }
}

fn check_batch(params: &Params, x: &Array2<f64>, labels: &[usize]) -> Result<()> {
    let first = params
        .layers
        .first()
        .ok_or_else(|| Error::model("network has no layers"))?;
    let classes = params.layers.last().map(|l| l.weights.nrows()).unwrap_or(0);
    if x.ncols() != first.weights.ncols() {
        return Err(Error::shape(format!(
            "batch has {} features, network expects {}",
            x.ncols(),
            first.weights.ncols()
        )));
    }
    if x.nrows() != labels.len() || x.nrows() == 0 {
        return Err(Error::shape(format!(
            "{} rows with {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn binarize(lp: &LayerParams, l: usize, clip: f64, anchor: Option<&Anchor>) -> Array2<f64> {
    let g = lp.weight_gamma;
    match anchor {
        None => lp.weights.mapv(|w| g * sign(w)),
        Some(a) => {
            let mut out = a.weight_signs[l].clone();
            ndarray::Zip::from(&mut out)
                .and(&lp.weights)
                .and(&a.weights[l])
                .for_each(|o, &w, &w0| *o = g * (*o + htanh(w, clip) - htanh(w0, clip)));
            out
        }
    }
}

fn encode_batch(y: &Array2<f64>, gammas: &[f64]) -> (Array2<f64>, ActCache) {
    let m = gammas.len();
    let mut e = Array2::zeros(y.raw_dim());
    let mut residuals = vec![Array2::zeros(y.raw_dim()); m];
    let mut signs = vec![Array2::zeros(y.raw_dim()); m];
    for (k, (&v, out)) in y.iter().zip(e.iter_mut()).enumerate() {
        let mut r = v;
        let mut acc = 0.0;
        for i in 0..m {
            let s = sign(r);
            residuals[i].as_slice_mut().expect("standard layout")[k] = r;
            signs[i].as_slice_mut().expect("standard layout")[k] = s;
            acc += s * gammas[i];
            r -= s * gammas[i];
        }
        *out = acc;
    }
    (
        e,
        ActCache {
            pre: y.clone(),
            residuals,
            signs,
        },
    )
}

fn encode_anchored(y: &Array2<f64>, gammas: &[f64], clip: f64, l: usize, a: &Anchor) -> (Array2<f64>, ActCache) {
    let m = gammas.len();
    let mut e = Array2::zeros(y.raw_dim());
    let mut residuals = vec![Array2::zeros(y.raw_dim()); m];
    let y0 = a.pre[l].as_slice().expect("standard layout");
    let s0: Vec<&[f64]> = a.act_signs[l].iter().map(|s| s.as_slice().expect("standard layout")).collect();
    for (k, (&v, out)) in y.iter().zip(e.iter_mut()).enumerate() {
        let mut c = 0.0;
        let mut acc = 0.0;
        for i in 0..m {
            let s = s0[i][k];
            residuals[i].as_slice_mut().expect("standard layout")[k] = v - c;
            acc += gammas[i] * (s + htanh(v - c, clip) - htanh(y0[k] - c, clip));
            c += gammas[i] * s;
        }
        *out = acc;
    }
    (
        e,
        ActCache {
            pre: y.clone(),
            residuals,
            signs: a.act_signs[l].clone(),
        },
    )
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

pub(crate) fn forward_impl(
    params: &Params,
    config: &TrainConfig,
    x: &Array2<f64>,
    labels: &[usize],
    anchor: Option<&Anchor>,
) -> Result<Cache> {
    check_batch(params, x, labels)?;
    let n = params.layers.len();
    let batch = x.nrows() as f64;
    let mut a = x.to_owned();
    let mut layers = Vec::with_capacity(n);
    let mut acts = Vec::with_capacity(n.saturating_sub(1));
    let mut logits = None;
    for (l, lp) in params.layers.iter().enumerate() {
        let binarized = binarize(lp, l, config.clip, anchor);
        let z = a.dot(&binarized.t());
        let mean = z.sum_axis(Axis(0)) / batch;
        let centered = &z - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / batch;
        let inv_std = var.mapv(|v| 1.0 / (v + config.bn_epsilon).sqrt());
        let xhat = &centered * &inv_std;
        let y = &xhat * &lp.bn_gain + &lp.bn_bias;
        layers.push(LayerCache {
            input: a,
            binarized,
            xhat,
            inv_std,
            mean,
            var,
        });
        if l + 1 < n {
            let gammas = params.gammas[l].as_slice().expect("standard layout");
            let (e, act) = match anchor {
                None => encode_batch(&y, gammas),
                Some(an) => encode_anchored(&y, gammas, config.clip, l, an),
            };
            acts.push(act);
            a = e;
        } else {
            logits = Some(y);
            a = Array2::zeros((0, 0));
        }
    }
    let logits = logits.expect("at least one layer");
    let probs = softmax_rows(&logits);
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &c)| probs[[i, c]].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / batch;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok(Cache {
        layers,
        acts,
        probs,
        labels: labels.to_vec(),
        step: 0,
        loss,
    })
}

/// Binary forward pass on a batch (`rows × features`) with batch-statistics
/// normalization. Returns the mean cross-entropy and the cache for
/// [`backward`].
pub fn forward_train(state: &ParamState, x: &Array2<f64>, labels: &[usize]) -> Result<(f64, Cache)> {
    let mut cache = forward_impl(&state.params, &state.config, x, labels, None)?;
    cache.step = state.step;
    Ok((cache.loss, cache))
}

pub(crate) fn backward_impl(params: &Params, config: &TrainConfig, cache: &Cache) -> Params {
    let clip = config.clip;
    let batch = cache.probs.nrows() as f64;
    let mut grads = params.zeros_like();
    let mut d = cache.probs.clone();
    for (i, &c) in cache.labels.iter().enumerate() {
        d[[i, c]] -= 1.0;
    }
    d /= batch;
    for l in (0..params.layers.len()).rev() {
        let lc = &cache.layers[l];
        let lp = &params.layers[l];
        let g = &mut grads.layers[l];
        g.bn_bias = d.sum_axis(Axis(0));
        g.bn_gain = (&d * &lc.xhat).sum_axis(Axis(0));
        let dxhat = &d * &lp.bn_gain;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &lc.xhat).sum_axis(Axis(0));
        let dz = ((&dxhat * batch) - &sum_dxhat - &(&lc.xhat * &sum_dxhat_xhat)) * (&lc.inv_std / batch);
        let dwb = dz.t().dot(&lc.input);
        let wg = lp.weight_gamma;
        let mut dgamma_w = 0.0;
        g.weights = Array2::zeros(lp.weights.raw_dim());
        ndarray::Zip::from(&mut g.weights)
            .and(&dwb)
            .and(&lp.weights)
            .for_each(|gw, &dw, &w| {
                dgamma_w += dw * sign(w);
                *gw = if w.abs() <= clip { dw * wg } else { 0.0 };
            });
        g.weight_gamma = dgamma_w;
        if l == 0 {
            break;
        }
        let da = dz.dot(&lc.binarized);
        let act = &cache.acts[l - 1];
        let gammas = params.gammas[l - 1].as_slice().expect("standard layout");
        let m = gammas.len();
        let dg = &mut grads.gammas[l - 1];
        for i in 0..m {
            dg[i] = da
                .iter()
                .zip(act.residuals[i].iter())
                .map(|(&u, &r)| grad_gamma(u, r))
                .sum();
        }
        let mut dy = da;
        let mut res = vec![0.0; m];
        for (k, v) in dy.iter_mut().enumerate() {
            for (i, r) in res.iter_mut().enumerate() {
                *r = act.residuals[i].as_slice().expect("standard layout")[k];
            }
            *v = grad_input(*v, gammas, &res, clip);
        }
        d = dy;
    }
    grads
}

/// Straight-through gradients of the loss recorded in `cache`.
pub fn backward(state: &ParamState, cache: &Cache) -> Result<Params> {
    if cache.step != state.step {
        return Err(Error::input(format!(
            "cache from step {} used at step {}",
            cache.step, state.step
        )));
    }
    Ok(backward_impl(&state.params, &state.config, cache))
}
