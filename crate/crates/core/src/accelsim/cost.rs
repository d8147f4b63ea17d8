use crate::error::{Error, Result};
use crate::netgraph::{Layer, Model, Shape};

use super::schedule;

/// Total XnorPopcount word operations per input.
pub fn op_count(model: &Model) -> Result<u64> {
    Ok(schedule(model)?.iter().map(|e| e.2.xnor_ops()).sum())
}

/// Memory ratio of XNOR-net style per-window scaling to a plain binary
/// layer: `(KHF + KHFT + KHT) / KHF`, i.e. `1 + T + T/F`.
pub fn xnornet_overhead(k: u64, h: u64, f: u64, t: u64) -> Result<f64> {
    if k == 0 || h == 0 || f == 0 || t == 0 {
        return Err(Error::input("kernel, height, filters, and bit width must be positive"));
    }
    let (k, h, f, t) = (u128::from(k), u128::from(h), u128::from(f), u128::from(t));
    let base = k * h * f;
    Ok((base + base * t + k * h * t) as f64 / base as f64)
}

/// Summed sliding-window overhead `Σ_{i≥2} (T + T/F_i) · P_i` over the
/// convolutions of `model`, where `F_i` is the input channel count and
/// `P_i` the fraction of resources spent on that layer's sliding window.
/// The first convolution reads fixed-point data and is excluded.
pub fn network_overhead(model: &Model, utilization: &[f64], total_bits: u32) -> Result<f64> {
    let channels: Vec<usize> = model
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(c) => Some(c.in_channels),
            _ => None,
        })
        .collect();
    if channels.is_empty() {
        return Err(Error::input("model has no convolution layers"));
    }
    if utilization.len() != channels.len() {
        return Err(Error::input(format!(
            "{} utilization values for {} convolution layers",
            utilization.len(),
            channels.len()
        )));
    }
    if utilization.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::input("utilization must be finite and non-negative"));
    }
    let t = f64::from(total_bits);
    Ok(channels
        .iter()
        .zip(utilization)
        .skip(1)
        .map(|(&f, &p)| (t + t / f as f64) * p)
        .sum())
}

/// Op-count ratio after multiplying every hidden width by `w` (rounded to
/// the nearest integer). Input and class counts, kernel sizes, spatial
/// geometry, and parallelism are unchanged.
pub fn widen_cost(model: &Model, w: f64) -> Result<f64> {
    if !(w >= 1.0) || !w.is_finite() {
        return Err(Error::input(format!("widening factor {w} must be at least 1")));
    }
    let base = op_count(model)?;
    let sched = schedule(model)?;
    let last = sched.len() - 1;
    let scale = |n: usize| ((n as f64) * w).round() as usize;
    let mut shape: Shape = model.input;
    let mut scaled_channels = model.input.channels;
    let mut widened = 0u64;
    let mut k = 0;
    for layer in &model.layers {
        match layer {
            Layer::Dense(d) => {
                let s = sched[k].2;
                let rows = if k == last { d.out_features } else { scale(d.out_features) };
                let cols = d.in_features / shape.channels * scaled_channels;
                widened += (s.windows * rows * cols.div_ceil(s.simd) * s.levels) as u64;
                shape = Shape::vector(d.out_features);
                scaled_channels = rows;
                k += 1;
            }
            Layer::Conv(c) => {
                let s = sched[k].2;
                let rows = if k == last { c.out_channels } else { scale(c.out_channels) };
                let cols = c.kernel * c.kernel * scaled_channels;
                widened += (s.windows * rows * cols.div_ceil(s.simd) * s.levels) as u64;
                shape = c.output_shape(shape)?;
                scaled_channels = rows;
                k += 1;
            }
            Layer::MaxPool { window } => {
                shape = Shape::new(shape.height / window, shape.width / window, shape.channels);
            }
            _ => {}
        }
    }
    Ok(widened as f64 / base as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{arch1, arch2, dense_topology, Parallelism};

    #[test]
    fn xnornet_examples() {
        assert_eq!(xnornet_overhead(3, 32, 64, 24).unwrap(), 25.375);
        assert_eq!(xnornet_overhead(3, 32, 3, 24).unwrap(), 33.0);
        let big = xnornet_overhead(3, 32, 1 << 40, 24).unwrap();
        assert!((big - 25.0).abs() < 1e-9);
        assert!(xnornet_overhead(0, 1, 1, 1).is_err());
    }

    #[test]
    fn network_overhead_examples() {
        let m = arch2(1).unwrap();
        let mut p = vec![0.0; 6];
        p[1] = 0.01;
        assert!((network_overhead(&m, &p, 24).unwrap() - 0.24375).abs() < 1e-15);
        // the first layer is excluded whatever its utilization
        p[0] = 0.5;
        assert!((network_overhead(&m, &p, 24).unwrap() - 0.24375).abs() < 1e-15);
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        assert!((network_overhead(&m, &doubled, 24).unwrap() - 0.4875).abs() < 1e-15);
        assert!(network_overhead(&m, &p[..5], 24).is_err());
        assert!(network_overhead(&arch1(1).unwrap(), &[], 24).is_err());
    }

    #[test]
    fn widen_identity_and_growth() {
        let m = arch1(1).unwrap();
        assert_eq!(widen_cost(&m, 1.0).unwrap(), 1.0);
        assert!(widen_cost(&m, 0.5).is_err());
        let deep = dense_topology(
            "deep",
            &[64, 512, 512, 512, 512, 512, 10],
            1,
            &[Parallelism::new(1, 64); 6],
        )
        .unwrap();
        let r = widen_cost(&deep, 2.0).unwrap();
        assert!((3.5..=4.0).contains(&r), "{r}");
        let a2 = arch2(1).unwrap();
        let mut prev = 1.0;
        for w in [1.25, 1.5, 2.0, 2.25] {
            let r = widen_cost(&a2, w).unwrap();
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn widened_arch2_costs_more_than_two_levels() {
        let one = arch2(1).unwrap();
        let two = arch2(2).unwrap();
        let widened = widen_cost(&one, 2.25).unwrap() * op_count(&one).unwrap() as f64;
        assert!(widened > 2.0 * op_count(&two).unwrap() as f64);
    }
}
