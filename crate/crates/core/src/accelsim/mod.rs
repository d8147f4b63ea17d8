//! Streaming accelerator model: sliding-window units feeding folded
//! matrix-vector-threshold units (MVTUs), one pipeline stage per layer.
//!
//! An MVTU with `P` processing elements and `S` SIMD lanes needs
//! `ceil(rows/P) · ceil(cols/S) · M` cycles per window. A layer fed with
//! fixed-point input also spends `ceil(cols/S)` cycles per window in an input
//! stage that does not scale with `M`. The pipeline initiation interval is
//! the slowest stage; compute is the only cost modeled.

pub mod cost;
mod mvtu;
mod stream;

pub use cost::{network_overhead, op_count, widen_cost, xnornet_overhead};
pub use mvtu::{encode_raw, mvtu_exec, MvtuOutput, MvtuParams};
pub use stream::{swu_stream, swu_stream_fixed, Stream, Window};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{maxpool_forward, CodeMap, Layer, Model, Parallelism, Shape};
use crate::residual::{ResidualEncoding, ScalingFactors};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Folding of one matrix-vector layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub rows: usize,
    pub cols: usize,
    pub pe: usize,
    pub simd: usize,
    pub levels: usize,
    pub windows: usize,
    pub fixed_input: bool,
}

impl LayerSchedule {
    pub fn new(rows: usize, cols: usize, p: Parallelism, levels: usize, windows: usize, fixed_input: bool) -> Self {
        LayerSchedule {
            rows,
            cols,
            pe: p.pe,
            simd: p.simd,
            levels,
            windows,
            fixed_input,
        }
    }

    pub fn neuron_fold(&self) -> usize {
        self.rows.div_ceil(self.pe)
    }

    pub fn synapse_fold(&self) -> usize {
        self.cols.div_ceil(self.simd)
    }

    pub fn mvtu_cycles(&self) -> u64 {
        (self.windows * self.neuron_fold() * self.synapse_fold() * self.levels) as u64
    }

    pub fn input_stage_cycles(&self) -> u64 {
        if self.fixed_input {
            (self.windows * self.synapse_fold()) as u64
        } else {
            0
        }
    }

    pub fn xnor_ops(&self) -> u64 {
        (self.windows * self.rows * self.synapse_fold() * self.levels) as u64
    }

    pub fn weight_bits(&self) -> u64 {
        (self.rows * self.cols) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub clock_mhz: f64,
    /// Cycles added to every stage, for calibration against measured
    /// throughput.
    pub overhead_cycles: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            clock_mhz: 200.0,
            overhead_cycles: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// Position of the matrix-vector layer in the model's layer list.
    pub index: usize,
    pub kind: String,
    #[serde(flatten)]
    pub schedule: LayerSchedule,
    pub neuron_fold: usize,
    pub synapse_fold: usize,
    pub mvtu_cycles: u64,
    pub input_stage_cycles: u64,
    pub overhead_cycles: u64,
    pub stage_cycles: u64,
    pub weight_bits: u64,
    pub threshold_bits: u64,
    pub xnor_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub model: String,
    pub levels: usize,
    pub clock_mhz: f64,
    pub layers: Vec<LayerReport>,
    pub initiation_interval: u64,
    pub latency_cycles: u64,
    pub throughput_per_second: f64,
    pub weight_bits: u64,
    pub threshold_bits: u64,
    pub xnor_ops: u64,
}

/// One entry per matrix-vector layer: `(layer index, kind, schedule,
/// followed by an encoder)`.
pub fn schedule(model: &Model) -> Result<Vec<(usize, &'static str, LayerSchedule, bool)>> {
    model.validate()?;
    let mut shape = model.input;
    let mut fixed = true;
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let encoded = matches!(model.layers.get(i + 2), Some(Layer::ResidualActivation(_)));
        match layer {
            Layer::Dense(d) => {
                out.push((
                    i,
                    "dense",
                    LayerSchedule::new(d.out_features, d.in_features, d.parallelism, model.levels, 1, fixed),
                    encoded,
                ));
                shape = Shape::vector(d.out_features);
                fixed = false;
            }
            Layer::Conv(c) => {
                let o = c.output_shape(shape)?;
                out.push((
                    i,
                    "conv",
                    LayerSchedule::new(
                        c.out_channels,
                        c.window_len(),
                        c.parallelism,
                        model.levels,
                        o.height * o.width,
                        fixed,
                    ),
                    encoded,
                ));
                shape = o;
                fixed = false;
            }
            Layer::MaxPool { window } => {
                shape = Shape::new(shape.height / window, shape.width / window, shape.channels);
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Cycle, memory, and op-count model of `model`; needs no input.
pub fn performance(model: &Model, config: &SimConfig) -> Result<SimReport> {
    if !(config.clock_mhz > 0.0) {
        return Err(Error::input("clock must be positive"));
    }
    let t = u64::from(model.format.total_bits);
    let layers: Vec<LayerReport> = schedule(model)?
        .into_iter()
        .map(|(index, kind, s, encoded)| {
            let mvtu = s.mvtu_cycles();
            let input = s.input_stage_cycles();
            LayerReport {
                index,
                kind: kind.to_string(),
                schedule: s,
                neuron_fold: s.neuron_fold(),
                synapse_fold: s.synapse_fold(),
                mvtu_cycles: mvtu,
                input_stage_cycles: input,
                overhead_cycles: config.overhead_cycles,
                stage_cycles: mvtu + input + config.overhead_cycles,
                weight_bits: s.weight_bits(),
                threshold_bits: s.rows as u64 * 2 * t + if encoded { s.levels as u64 * t } else { 0 },
                xnor_ops: s.xnor_ops(),
            }
        })
        .collect();
    let ii = layers.iter().map(|l| l.stage_cycles).max().unwrap_or(0);
    Ok(SimReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: model.name.clone(),
        levels: model.levels,
        clock_mhz: config.clock_mhz,
        initiation_interval: ii,
        latency_cycles: layers.iter().map(|l| l.stage_cycles).sum(),
        throughput_per_second: config.clock_mhz * 1e6 / ii as f64,
        weight_bits: layers.iter().map(|l| l.weight_bits).sum(),
        threshold_bits: layers.iter().map(|l| l.threshold_bits).sum(),
        xnor_ops: layers.iter().map(|l| l.xnor_ops).sum(),
        layers,
    })
}

enum Flow {
    Fixed(Vec<i64>),
    Codes(CodeMap, ScalingFactors),
    Scores(Vec<i64>),
}

/// Streams one input through the accelerator. Scores are bit-identical to
/// [`crate::netgraph::reference_forward`]; the measured cycles are checked
/// against the analytic schedule.
pub fn simulate(model: &Model, input: &[f64], config: &SimConfig) -> Result<(Vec<f64>, SimReport)> {
    let report = performance(model, config)?;
    model.check_quantized()?;
    if input.len() != model.input.len() {
        return Err(Error::shape(format!(
            "model expects {} input values, got {}",
            model.input.len(),
            input.len()
        )));
    }
    let f = model.format;
    let raw = |v: f64| f.to_raw(v);
    let mut flow = Flow::Fixed(input.iter().map(|&v| raw(v)).collect());
    let mut shape = model.input;
    let mut next = report.layers.iter();
    let mut i = 0;
    while i < model.layers.len() {
        let layer = &model.layers[i];
        let (weights, weight_gamma, window) = match layer {
            Layer::Dense(d) => (&d.weights, d.weight_gamma, Window::dense(d.in_features)),
            Layer::Conv(c) => (
                &c.weights,
                c.weight_gamma,
                Window {
                    shape,
                    kernel: c.kernel,
                    stride: c.stride,
                },
            ),
            Layer::MaxPool { window } => {
                let Flow::Codes(map, sf) = flow else {
                    unreachable!("validated: pooling follows an activation")
                };
                let pooled = maxpool_forward(&map, *window, &sf)?;
                shape = pooled.shape;
                flow = Flow::Codes(pooled, sf);
                i += 1;
                continue;
            }
            _ => unreachable!("validated: normalization and activations are fused into the MVTU"),
        };
        let lr = next.next().expect("one report per matrix-vector layer");
        let s = lr.schedule;
        let Some(Layer::BatchNorm(bn)) = model.layers.get(i + 1) else {
            unreachable!("validated: batch norm follows a matrix-vector layer")
        };
        let out_sf = match model.layers.get(i + 2) {
            Some(Layer::ResidualActivation(sf)) => Some(sf.clone()),
            _ => None,
        };
        let (stream, input_gammas) = match &flow {
            Flow::Fixed(x) => (swu_stream_fixed(x, window, s.simd)?, None),
            Flow::Codes(map, sf) => (
                swu_stream(&map.enc, window, s.simd)?,
                Some(sf.gammas().iter().map(|&g| raw(g)).collect()),
            ),
            Flow::Scores(_) => unreachable!("validated: softmax is terminal"),
        };
        let params = MvtuParams {
            format: f,
            input_gammas,
            weight_gamma: raw(weight_gamma),
            alpha: bn.alpha.iter().map(|&a| raw(a)).collect(),
            beta: bn.beta.iter().map(|&b| raw(b)).collect(),
            output_gammas: out_sf.as_ref().map(|sf| sf.gammas().iter().map(|&g| raw(g)).collect()),
        };
        let out = mvtu_exec(&s, weights, &params, &stream)?;
        if out.cycles != lr.mvtu_cycles + lr.input_stage_cycles {
            return Err(Error::Stream(format!(
                "layer {i}: executed {} cycles, schedule says {}",
                out.cycles,
                lr.mvtu_cycles + lr.input_stage_cycles
            )));
        }
        let (oh, ow) = window.output_dims()?;
        shape = Shape::new(oh, ow, s.rows);
        flow = match (out.codes, out_sf) {
            (Some(codes), Some(sf)) => Flow::Codes(
                CodeMap {
                    shape,
                    enc: ResidualEncoding::from_codes(&codes, sf.levels())?,
                },
                sf,
            ),
            _ => Flow::Scores(out.normalized),
        };
        i += 3;
    }
    match flow {
        Flow::Scores(s) => Ok((s.into_iter().map(|r| f.from_raw(r)).collect(), report)),
        _ => unreachable!("validated: model ends with softmax"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{arch1, arch2, ARCH1_PARALLELISM};

    #[test]
    fn arch1_cycles() {
        let r1 = performance(&arch1(1).unwrap(), &SimConfig::default()).unwrap();
        let r2 = performance(&arch1(2).unwrap(), &SimConfig::default()).unwrap();
        let c1: Vec<u64> = r1.layers.iter().map(|l| l.mvtu_cycles).collect();
        assert_eq!(c1, vec![208, 128, 128, 64]);
        for (a, b) in r1.layers.iter().zip(&r2.layers) {
            assert_eq!(b.mvtu_cycles, 2 * a.mvtu_cycles);
        }
        assert_eq!(r1.initiation_interval, 221);
        assert_eq!(r2.initiation_interval, 429);
        let ratio = r1.throughput_per_second / r2.throughput_per_second;
        assert!((1.9..=2.0).contains(&ratio), "{ratio}");
        assert_eq!(r1.weight_bits, r2.weight_bits);
        assert_eq!(r1.weight_bits, 784 * 256 + 2 * 256 * 256 + 2560);
        assert_eq!(r1.layers[0].schedule.pe, ARCH1_PARALLELISM[0].pe);
    }

    #[test]
    fn arch2_schedule_windows() {
        let s = schedule(&arch2(1).unwrap()).unwrap();
        let windows: Vec<usize> = s.iter().map(|e| e.2.windows).collect();
        assert_eq!(windows, vec![900, 784, 144, 100, 9, 1, 1, 1, 1]);
        assert!(s[0].2.fixed_input && !s[1].2.fixed_input);
    }

    #[test]
    fn overhead_knob_adds_per_stage() {
        let m = arch1(1).unwrap();
        let cfg = SimConfig {
            overhead_cycles: 10,
            ..Default::default()
        };
        let r = performance(&m, &cfg).unwrap();
        assert_eq!(r.initiation_interval, 231);
        assert_eq!(r.latency_cycles, 221 + 128 + 128 + 64 + 40);
    }

    #[test]
    fn report_serializes() {
        let r = performance(&arch1(1).unwrap(), &SimConfig::default()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["layers"][0]["rows"], 256);
        let back: SimReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn random_models_bit_exact() {
        use crate::netgraph::random::{random_input, random_model, RandomSpec};
        use crate::netgraph::reference_forward;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let m = random_model(&mut rng, RandomSpec::default()).unwrap();
            for _ in 0..3 {
                let x = random_input(&mut rng, &m);
                let want = reference_forward(&m, &x).unwrap();
                let (got, _) = simulate(&m, &x, &SimConfig::default()).unwrap();
                assert_eq!(got, want, "{m:?}");
            }
        }
    }

    #[test]
    fn simulate_rejects_off_grid_models() {
        let mut m = arch1(1).unwrap();
        if let Layer::BatchNorm(bn) = &mut m.layers[1] {
            bn.alpha[0] = 1.0 + 1e-9;
        }
        assert!(simulate(&m, &[0.0; 784], &SimConfig::default()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn fold_properties(rows in 1usize..300, cols in 1usize..300, pe in 1usize..64, simd in 1usize..=64, m in 1usize..=4) {
            let s = LayerSchedule::new(rows, cols, Parallelism::new(pe, simd), m, 1, false);
            let one = LayerSchedule { levels: 1, ..s };
            proptest::prop_assert_eq!(s.mvtu_cycles(), m as u64 * one.mvtu_cycles());
            let more_pe = LayerSchedule { pe: pe + 1, ..s };
            let more_simd = LayerSchedule { simd: (simd + 1).min(64), ..s };
            proptest::prop_assert!(more_pe.mvtu_cycles() <= s.mvtu_cycles());
            proptest::prop_assert!(more_simd.mvtu_cycles() <= s.mvtu_cycles());
            let work = (rows * cols * m) as u64;
            let capacity = s.mvtu_cycles() * (pe * simd) as u64;
            proptest::prop_assert!(capacity >= work);
            let slack = ((pe * simd) * (s.neuron_fold() + s.synapse_fold())) as u64 * m as u64;
            proptest::prop_assert!(capacity - work < slack);
        }
    }
}
