use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::forward_impl;
use super::{backward, export, forward_train, ParamState};
use crate::error::{Error, Result};
use crate::fixed::FixedPointFormat;
use crate::netgraph::{argmax, reference_forward, Model, Parallelism};

/// Labelled feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows with {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("dataset contains non-finite features"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            features: self.features.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }
}

/// One line of the learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the exported model on the evaluation set.
    pub test_accuracy: f64,
    pub gammas: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ParamState,
    pub model: Model,
    pub curve: Vec<EpochRecord>,
}

/// Predicted class of every row, computed with [`reference_forward`] on
/// [`crate::pool::worker_threads`] workers.
pub fn predict(model: &Model, features: &Array2<f64>) -> Result<Vec<usize>> {
    let rows: Vec<usize> = (0..features.nrows()).collect();
    crate::pool::map_ordered(&rows, crate::pool::worker_threads(), |&i| {
        let row = features.row(i);
        let scores = match row.as_slice() {
            Some(s) => reference_forward(model, s)?,
            None => reference_forward(model, &row.to_vec())?,
        };
        Ok(argmax(&scores))
    })
}

/// Fraction of rows whose top-scoring class under `model` matches the label.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let pred = predict(model, &data.features)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

fn gather(data: &Dataset, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
    (
        data.features.select(Axis(0), idx),
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

/// Sets `γ_1` of every hidden layer to the mean magnitude of its encoder
/// input on one batch, halving for each further level.
fn init_gammas(state: &mut ParamState, x: &Array2<f64>, labels: &[usize]) -> Result<()> {
    for l in 0..state.params.gammas.len() {
        let cache = forward_impl(&state.params, &state.config, x, labels, None)?;
        let pre = cache.pre_activations().nth(l).expect("hidden layer");
        let first = pre.iter().map(|v| v.abs()).sum::<f64>() / pre.len() as f64;
        if !(first > 0.0) || !first.is_finite() {
            return Err(Error::Numeric(format!("layer {l}: cannot initialize scales from {first}")));
        }
        let g = &mut state.params.gammas[l];
        for (i, v) in g.iter_mut().enumerate() {
            *v = first * 0.5f64.powi(i as i32);
        }
    }
    Ok(())
}

/// Runs `state.config.epochs` further epochs of minibatch Adam.
///
/// After every epoch the state is exported with `format` and scored on
/// `eval`; `on_epoch` sees each record as it is produced. Shuffling is
/// seeded from the configuration seed and the epoch index, so a resumed run
/// replays the same batches as an uninterrupted one.
pub fn train_loop(
    mut state: ParamState,
    train: &Dataset,
    eval: &Dataset,
    parallelism: &[Parallelism],
    format: FixedPointFormat,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    state.config.validate()?;
    let classes = *state.widths.last().expect("validated widths");
    for (what, d) in [("training", train), ("evaluation", eval)] {
        if d.is_empty() {
            return Err(Error::input(format!("{what} set is empty")));
        }
        if d.dim() != state.widths[0] || d.classes != classes {
            return Err(Error::shape(format!(
                "{what} set has {} features / {} classes, network is {:?}",
                d.dim(),
                d.classes,
                state.widths
            )));
        }
    }
    let batch = state.config.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();
    let mut model = None;
    for _ in 0..state.config.epochs {
        let epoch = state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        // a trailing partial batch is dropped
        for chunk in order.chunks_exact(batch) {
            let (x, y) = gather(train, chunk);
            if state.step == 0 {
                init_gammas(&mut state, &x, &y)?;
            }
            let (loss, cache) = forward_train(&state, &x, &y).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch} batch {batches}: {msg}")),
                other => other,
            })?;
            let grads = backward(&state, &cache)?;
            let m = state.config.bn_momentum;
            for (rs, (mean, var)) in state.running.iter_mut().zip(cache.batch_stats()) {
                rs.mean = &rs.mean * (1.0 - m) + mean * m;
                rs.var = &rs.var * (1.0 - m) + var * m;
            }
            state.apply(&grads);
            if state.params.groups().iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!(
                    "epoch {epoch} batch {batches}: parameters diverged"
                )));
            }
            loss_sum += loss;
            batches += 1;
        }
        state.epoch += 1;
        let exported = export(&state, "trained", parallelism, format)?;
        let test_accuracy = evaluate(&exported.model, eval)?;
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss: loss_sum / batches as f64,
            test_accuracy,
            gammas: state.params.gammas.iter().map(|g| g.to_vec()).collect(),
        };
        on_epoch(&record);
        curve.push(record);
        model = Some(exported.model);
    }
    Ok(TrainOutcome {
        state,
        model: model.expect("at least one epoch"),
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;
    use rand::Rng;

    /// Two Gaussian-ish blobs separated along a random direction.
    fn separable(n: usize, dim: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = Array2::zeros((n, dim));
        let mut y = Vec::with_capacity(n);
        let fmt = FixedPointFormat::default();
        for i in 0..n {
            let label = i % 2;
            let side = if label == 1 { 1.0 } else { -1.0 };
            for j in 0..dim {
                x[[i, j]] = fmt.quantize(side * dir[j] + rng.gen_range(-0.3..0.3));
            }
            y.push(label);
        }
        Dataset::new(x, y, 2).unwrap()
    }

    fn cfg(levels: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            levels,
            epochs,
            batch_size: 16,
            learning_rate: 1e-2,
            seed: 11,
            ..Default::default()
        }
    }

    fn run(levels: usize, epochs: usize) -> TrainOutcome {
        let data = separable(128, 8, 4);
        let c = cfg(levels, epochs);
        let state = ParamState::seeded(&[8, 16, 2], &c).unwrap();
        train_loop(state, &data, &data, &[Parallelism::default(); 2], FixedPointFormat::default(), |_| {}).unwrap()
    }

    #[test]
    fn separable_toy_is_learned() {
        for levels in [1, 2] {
            let out = run(levels, 50);
            let best = out.curve.iter().map(|r| r.test_accuracy).fold(0.0, f64::max);
            assert_eq!(best, 1.0, "levels {levels}: {:?}", out.curve.last());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let a = run(2, 3);
        let b = run(2, 3);
        assert_eq!(a.state.params.checksum(), b.state.params.checksum());
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let data = separable(64, 8, 4);
        let c = cfg(1, 4);
        let full = train_loop(
            ParamState::seeded(&[8, 16, 2], &c).unwrap(),
            &data,
            &data,
            &[Parallelism::default(); 2],
            FixedPointFormat::default(),
            |_| {},
        )
        .unwrap();
        let half = TrainConfig { epochs: 2, ..c };
        let first = train_loop(
            ParamState::seeded(&[8, 16, 2], &half).unwrap(),
            &data,
            &data,
            &[Parallelism::default(); 2],
            FixedPointFormat::default(),
            |_| {},
        )
        .unwrap();
        let second = train_loop(
            first.state,
            &data,
            &data,
            &[Parallelism::default(); 2],
            FixedPointFormat::default(),
            |_| {},
        )
        .unwrap();
        assert_eq!(second.state.params, full.state.params);
        assert_eq!(second.state.epoch, 4);
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let data = separable(32, 8, 4);
        let state = ParamState::seeded(&[7, 4, 2], &cfg(1, 1)).unwrap();
        let r = train_loop(state, &data, &data, &[Parallelism::default(); 2], FixedPointFormat::default(), |_| {});
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
