//! The forward/backward contract shared by every layer.

use std::any::Any;
use std::fmt;

use crate::error::Result;
use crate::tensor::Tensor;
use crate::whitening::BatchStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which domain a batch came from. Normalization layers keep separate
/// statistics per domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum DomainTag {
    Source,
    #[default]
    Target,
}

impl DomainTag {
    pub fn name(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    /// Scale/shift parameters of normalization layers skip weight decay.
    pub weight_decay_exempt: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            weight_decay_exempt: false,
        }
    }

    pub fn exempt(value: Tensor) -> Self {
        Parameter {
            weight_decay_exempt: true,
            ..Parameter::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding of `kernel / 2` on each side (odd kernels keep the size at stride 1).
    Same,
}

/// Serializable description of one layer, enough to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense {
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
    BatchNorm {
        features: usize,
        epsilon: f64,
        momentum: f64,
    },
    Dwt {
        features: usize,
        group_size: usize,
        epsilon: f64,
        momentum: f64,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::BatchNorm { .. } => "bn",
            LayerSpec::Dwt { .. } => "dwt",
        }
    }
}

/// Running statistics for one domain: `None` until the first train-mode
/// update, then one entry per feature group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub groups: Option<Vec<BatchStats>>,
}

impl RunningStats {
    pub fn is_initialized(&self) -> bool {
        self.groups.is_some()
    }
}

/// Stateful layer. `forward` caches whatever `backward` needs; `backward`
/// consumes that cache, accumulates parameter gradients and returns the
/// gradient with respect to the forward input.
pub trait Layer: Send + Sync {
    fn spec(&self) -> LayerSpec;

    fn name(&self) -> &'static str {
        self.spec().kind()
    }

    fn forward(&mut self, input: &Tensor, mode: Mode, domain: DomainTag) -> Result<Tensor>;

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&Parameter> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        Vec::new()
    }

    /// Source then target running statistics, for normalization layers.
    fn running(&self) -> Vec<&RunningStats> {
        Vec::new()
    }

    fn running_mut(&mut self) -> Vec<&mut RunningStats> {
        Vec::new()
    }

    fn clone_box(&self) -> Box<dyn Layer>;

    fn as_any(&self) -> &dyn Any;
}

impl Clone for Box<dyn Layer> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}
