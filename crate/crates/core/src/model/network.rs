use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::{DomainTag, Layer, LayerSpec, Mode, Parameter, RunningStats};
use crate::model::activation::{Flatten, MaxPool2d, Relu};
use crate::model::batchnorm::BatchNorm;
use crate::model::conv::Conv2d;
use crate::model::dense::Dense;
use crate::tensor::Tensor;
use crate::whitening::DwtLayer;

/// A sequential stack of layers ending in class logits.
#[derive(Clone)]
pub struct Network {
    layers: Vec<Box<dyn Layer>>,
    /// Per-sample input shape, without the batch axis.
    input_shape: Vec<usize>,
    classes: usize,
}

fn build_layer(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Result<Box<dyn Layer>> {
    Ok(match *spec {
        LayerSpec::Dense { fan_in, fan_out, bias } => Box::new(Dense::new(fan_in, fan_out, bias, rng)?),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => Box::new(Conv2d::new(
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
            rng,
        )?),
        LayerSpec::Relu => Box::new(Relu::new()),
        LayerSpec::MaxPool { size } => Box::new(MaxPool2d::new(size)?),
        LayerSpec::Flatten => Box::new(Flatten::new()),
        LayerSpec::BatchNorm {
            features,
            epsilon,
            momentum,
        } => Box::new(BatchNorm::new(features, epsilon, momentum)?),
        LayerSpec::Dwt {
            features,
            group_size,
            epsilon,
            momentum,
        } => Box::new(DwtLayer::new(features, group_size, epsilon, momentum)?),
    })
}

impl Network {
    /// Build from layer specs, drawing weights from a ChaCha stream seeded
    /// with `seed`. The stack is validated by pushing a 2-sample zero batch
    /// through it in train mode on scratch copies.
    pub fn from_specs(input_shape: &[usize], specs: &[LayerSpec], classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|s| build_layer(s, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let net = Network {
            layers,
            input_shape: input_shape.to_vec(),
            classes,
        };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut scratch = self.clone();
        let mut shape = vec![2];
        shape.extend_from_slice(&self.input_shape);
        let x = Tensor::new(
            shape.clone(),
            (0..shape.iter().product::<usize>()).map(|i| (i % 7) as f64).collect(),
        )?;
        let out = scratch.forward(&x, Mode::Train, DomainTag::Source)?;
        if out.shape() != [2, self.classes] {
            return Err(Error::shape(format!(
                "network produces {:?}, expected [_, {}]",
                out.shape(),
                self.classes
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    pub fn dwt_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.spec(), LayerSpec::Dwt { .. }))
            .count()
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode, domain: DomainTag) -> Result<Tensor> {
        if input.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "network expects samples of shape {:?}, got batch {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode, domain)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let mut g = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn running(&self) -> Vec<&RunningStats> {
        self.layers.iter().flat_map(|l| l.running()).collect()
    }

    pub fn running_mut(&mut self) -> Vec<&mut RunningStats> {
        self.layers.iter_mut().flat_map(|l| l.running_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values, concatenated in registry order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params()
            .iter()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Whitening layers, in order.
    pub fn dwt_layers(&self) -> Vec<&DwtLayer> {
        self.layers
            .iter()
            .filter_map(|l| l.as_any().downcast_ref::<DwtLayer>())
            .collect()
    }

    /// Copy parameter values and running statistics from a network with the
    /// same layer structure.
    pub fn copy_state_from(&mut self, other: &Network) -> Result<()> {
        self.check_same_structure(other)?;
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.value = src.value.clone();
        }
        for (dst, src) in self.running_mut().into_iter().zip(other.running()) {
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn check_same_structure(&self, other: &Network) -> Result<()> {
        let a: Vec<Vec<usize>> = self.params().iter().map(|p| p.value.shape().to_vec()).collect();
        let b: Vec<Vec<usize>> = other.params().iter().map(|p| p.value.shape().to_vec()).collect();
        if a != b || self.running().len() != other.running().len() {
            return Err(Error::State("networks have different structure".into()));
        }
        Ok(())
    }
}
