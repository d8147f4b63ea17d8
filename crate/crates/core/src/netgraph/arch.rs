//! Reference topologies. Parameters are placeholders (all-negative weights,
//! identity normalization, halving scales); trained values come from the
//! exporter.

use crate::bitcore::BitVector;
use crate::error::{Error, Result};
use crate::fixed::FixedPointFormat;
use crate::residual::ScalingFactors;

use super::{BatchNorm, ConvLayer, DenseLayer, Layer, Model, Parallelism, Shape};

/// (PE, SIMD) for the four layers of the MNIST MLP.
pub const ARCH1_PARALLELISM: [Parallelism; 4] = [
    Parallelism::new(16, 64),
    Parallelism::new(32, 16),
    Parallelism::new(16, 32),
    Parallelism::new(16, 4),
];

fn placeholder_bn(channels: usize) -> Layer {
    Layer::BatchNorm(BatchNorm {
        alpha: vec![1.0; channels],
        beta: vec![0.0; channels],
    })
}

fn placeholder_activation(levels: usize) -> Result<Layer> {
    Ok(Layer::ResidualActivation(ScalingFactors::geometric(1.0, levels)?))
}

fn dense(in_features: usize, out_features: usize, parallelism: Parallelism) -> Layer {
    Layer::Dense(DenseLayer {
        in_features,
        out_features,
        weights: vec![BitVector::zeros(in_features); out_features],
        weight_gamma: 1.0,
        parallelism,
    })
}

fn conv(kernel: usize, in_channels: usize, out_channels: usize, parallelism: Parallelism) -> Layer {
    Layer::Conv(ConvLayer {
        kernel,
        stride: 1,
        in_channels,
        out_channels,
        weights: vec![BitVector::zeros(kernel * kernel * in_channels); out_channels],
        weight_gamma: 1.0,
        parallelism,
    })
}

/// Fully connected network `widths[0] → … → widths[last]`.
pub fn dense_topology(
    name: &str,
    widths: &[usize],
    levels: usize,
    parallelism: &[Parallelism],
) -> Result<Model> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::input(format!("invalid layer widths {widths:?}")));
    }
    if parallelism.len() != widths.len() - 1 {
        return Err(Error::input(format!(
            "{} parallelism entries for {} layers",
            parallelism.len(),
            widths.len() - 1
        )));
    }
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        layers.push(dense(pair[0], pair[1], parallelism[i]));
        layers.push(placeholder_bn(pair[1]));
        if i + 2 < widths.len() {
            layers.push(placeholder_activation(levels)?);
        } else {
            layers.push(Layer::Softmax);
        }
    }
    let model = Model {
        name: name.to_string(),
        input: Shape::vector(widths[0]),
        levels,
        format: FixedPointFormat::default(),
        layers,
    };
    model.validate()?;
    Ok(model)
}

/// MNIST MLP: 784-256-256-256-10.
pub fn arch1(levels: usize) -> Result<Model> {
    dense_topology("arch1", &[784, 256, 256, 256, 10], levels, &ARCH1_PARALLELISM)
}

/// CIFAR-10/SVHN convolutional network on 32×32×3 inputs.
pub fn arch2(levels: usize) -> Result<Model> {
    let p = Parallelism::new;
    let mut layers = Vec::new();
    let mut push_block = |layer: Layer, channels: usize, pool: bool| -> Result<()> {
        layers.push(layer);
        layers.push(placeholder_bn(channels));
        layers.push(placeholder_activation(levels)?);
        if pool {
            layers.push(Layer::MaxPool { window: 2 });
        }
        Ok(())
    };
    push_block(conv(3, 3, 64, p(16, 3)), 64, false)?;
    push_block(conv(3, 64, 64, p(32, 32)), 64, true)?;
    push_block(conv(3, 64, 128, p(16, 32)), 128, false)?;
    push_block(conv(3, 128, 128, p(16, 32)), 128, true)?;
    push_block(conv(3, 128, 256, p(4, 32)), 256, false)?;
    push_block(conv(3, 256, 256, p(1, 32)), 256, false)?;
    push_block(dense(256, 512, p(1, 4)), 512, false)?;
    push_block(dense(512, 512, p(1, 8)), 512, false)?;
    layers.push(dense(512, 10, p(4, 1)));
    layers.push(placeholder_bn(10));
    layers.push(Layer::Softmax);
    let model = Model {
        name: "arch2".into(),
        input: Shape::new(32, 32, 3),
        levels,
        format: FixedPointFormat::default(),
        layers,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::Signal;

    #[test]
    fn arch1_shape() {
        let m = arch1(2).unwrap();
        assert_eq!(m.num_classes().unwrap(), 10);
        let dense: Vec<_> = m
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some((d.in_features, d.out_features, d.parallelism)),
                _ => None,
            })
            .collect();
        assert_eq!(dense.len(), 4);
        assert_eq!(dense[0], (784, 256, Parallelism::new(16, 64)));
        assert_eq!(dense[3], (256, 10, Parallelism::new(16, 4)));
    }

    #[test]
    fn arch2_shapes_compose() {
        let m = arch2(1).unwrap();
        let signals = m.validate().unwrap();
        // after the last convolution the map is 1x1x256
        assert!(signals.contains(&Signal::Codes(Shape::new(1, 1, 256))));
        assert_eq!(m.num_classes().unwrap(), 10);
    }
}
