//! Layers and the two network families used in experiments.
//!
//! Both builders place whitening layers in the first `n_dwt` blocks and batch
//! normalization in the rest. Linear/conv layers that feed a normalization
//! layer carry no bias, since centering would cancel it.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod network;

pub use activation::{Flatten, MaxPool2d, Relu};
pub use batchnorm::BatchNorm;
pub use conv::Conv2d;
pub use dense::Dense;
pub use network::Network;

use crate::error::{Error, Result};
use crate::layer::{LayerSpec, Padding};
use crate::whitening::{DEFAULT_EPSILON, DEFAULT_MOMENTUM};

/// Shared knobs for the normalization layers of a network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormConfig {
    pub n_dwt: usize,
    pub group_size: usize,
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            n_dwt: 0,
            group_size: 4,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl NormConfig {
    fn layer(&self, block: usize, features: usize) -> Result<LayerSpec> {
        if block < self.n_dwt {
            if !features.is_multiple_of(self.group_size) {
                return Err(Error::Param(format!(
                    "group size {} does not divide width {features} of block {block}",
                    self.group_size
                )));
            }
            Ok(LayerSpec::Dwt {
                features,
                group_size: self.group_size,
                epsilon: self.epsilon,
                momentum: self.momentum,
            })
        } else {
            Ok(LayerSpec::BatchNorm {
                features,
                epsilon: self.epsilon,
                momentum: self.momentum,
            })
        }
    }
}

/// Layer specs for `dense → norm → relu` blocks over `hidden`, then a biased
/// dense layer to `classes` logits.
pub fn mlp_specs(input_dim: usize, hidden: &[usize], classes: usize, norm: &NormConfig) -> Result<Vec<LayerSpec>> {
    if norm.n_dwt > hidden.len() {
        return Err(Error::Param(format!(
            "{} whitening layers requested for {} hidden layers",
            norm.n_dwt,
            hidden.len()
        )));
    }
    if input_dim == 0 || classes == 0 || hidden.contains(&0) {
        return Err(Error::Param("layer widths must be positive".into()));
    }
    let mut specs = Vec::new();
    let mut prev = input_dim;
    for (block, &h) in hidden.iter().enumerate() {
        specs.push(LayerSpec::Dense {
            fan_in: prev,
            fan_out: h,
            bias: false,
        });
        specs.push(norm.layer(block, h)?);
        specs.push(LayerSpec::Relu);
        prev = h;
    }
    specs.push(LayerSpec::Dense {
        fan_in: prev,
        fan_out: classes,
        bias: true,
    });
    Ok(specs)
}

pub fn build_mlp(input_dim: usize, hidden: &[usize], classes: usize, norm: &NormConfig, seed: u64) -> Result<Network> {
    let specs = mlp_specs(input_dim, hidden, classes, norm)?;
    Network::from_specs(&[input_dim], &specs, classes, seed)
}

/// Closed-form parameter count of [`build_mlp`].
pub fn mlp_param_count(input_dim: usize, hidden: &[usize], classes: usize) -> usize {
    let mut prev = input_dim;
    let mut n = 0;
    for &h in hidden {
        n += prev * h + 2 * h;
        prev = h;
    }
    n + prev * classes + classes
}

/// `[conv3×3 → norm → relu → maxpool2]` per entry of `channels`, then flatten
/// and a dense layer to `classes`. `input` is `(channels, height, width)`.
pub fn cnn_specs(
    input: (usize, usize, usize),
    channels: &[usize],
    classes: usize,
    norm: &NormConfig,
) -> Result<Vec<LayerSpec>> {
    if norm.n_dwt > channels.len() {
        return Err(Error::Param(format!(
            "{} whitening layers requested for {} conv blocks",
            norm.n_dwt,
            channels.len()
        )));
    }
    let (mut c, mut h, mut w) = input;
    let mut specs = Vec::new();
    for (block, &co) in channels.iter().enumerate() {
        specs.push(LayerSpec::Conv2d {
            in_channels: c,
            out_channels: co,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
            bias: false,
        });
        specs.push(norm.layer(block, co)?);
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::MaxPool { size: 2 });
        c = co;
        h /= 2;
        w /= 2;
        if h == 0 || w == 0 {
            return Err(Error::Param("input too small for the number of pooling stages".into()));
        }
    }
    specs.push(LayerSpec::Flatten);
    specs.push(LayerSpec::Dense {
        fan_in: c * h * w,
        fan_out: classes,
        bias: true,
    });
    Ok(specs)
}

pub fn build_cnn(
    input: (usize, usize, usize),
    channels: &[usize],
    classes: usize,
    norm: &NormConfig,
    seed: u64,
) -> Result<Network> {
    let specs = cnn_specs(input, channels, classes, norm)?;
    Network::from_specs(&[input.0, input.1, input.2], &specs, classes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{DomainTag, Mode};
    use crate::tensor::Tensor;

    fn norm(n_dwt: usize, g: usize) -> NormConfig {
        NormConfig {
            n_dwt,
            group_size: g,
            ..NormConfig::default()
        }
    }

    #[test]
    fn mlp_without_whitening_is_bn_network() {
        let net = build_mlp(4, &[8, 8], 3, &norm(0, 4), 0).unwrap();
        assert_eq!(net.dwt_count(), 0);
        let kinds: Vec<_> = net.specs().iter().map(LayerSpec::kind).collect();
        assert_eq!(kinds, ["dense", "bn", "relu", "dense", "bn", "relu", "dense"]);
    }

    #[test]
    fn whitening_goes_in_leading_blocks() {
        let net = build_mlp(4, &[8, 8, 8], 3, &norm(2, 4), 0).unwrap();
        let kinds: Vec<_> = net.specs().iter().map(LayerSpec::kind).collect();
        assert_eq!(
            kinds,
            ["dense", "dwt", "relu", "dense", "dwt", "relu", "dense", "bn", "relu", "dense"]
        );
        let net = build_mlp(16, &[64, 64, 64], 10, &norm(3, 4), 0).unwrap();
        assert_eq!(net.dwt_count(), 3);
    }

    #[test]
    fn mlp_parameter_count() {
        for (hidden, n_dwt) in [(vec![8], 1), (vec![64, 64], 2), (vec![16, 12, 8], 1)] {
            let net = build_mlp(5, &hidden, 3, &norm(n_dwt, 4), 1).unwrap();
            assert_eq!(net.param_count(), mlp_param_count(5, &hidden, 3));
        }
        // 5·8 + 2·8 + 8·3 + 3
        assert_eq!(mlp_param_count(5, &[8], 3), 83);
    }

    #[test]
    fn invalid_mlp_configs() {
        assert!(build_mlp(4, &[8], 3, &norm(2, 4), 0).is_err());
        assert!(build_mlp(4, &[6], 3, &norm(1, 4), 0).is_err());
        assert!(build_mlp(4, &[0], 3, &norm(0, 4), 0).is_err());
    }

    #[test]
    fn cnn_reaches_logits_on_digit_sized_input() {
        let mut net = build_cnn((1, 28, 28), &[8, 16], 10, &norm(1, 4), 0).unwrap();
        let kinds: Vec<_> = net.specs().iter().map(LayerSpec::kind).collect();
        assert_eq!(kinds[..3], ["conv2d", "dwt", "relu"]);
        assert_eq!(kinds[5], "bn");
        let y = net
            .forward(&Tensor::full(&[3, 1, 28, 28], 0.5), Mode::Train, DomainTag::Source)
            .unwrap();
        assert_eq!(y.shape(), &[3, 10]);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_mlp(4, &[8], 3, &norm(1, 2), 7).unwrap();
        let b = build_mlp(4, &[8], 3, &norm(0, 2), 7).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
    }
}
