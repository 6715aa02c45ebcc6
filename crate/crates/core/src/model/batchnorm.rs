use std::any::Any;

use crate::error::{Error, Result};
use crate::layer::{DomainTag, Layer, LayerSpec, Mode, Parameter, RunningStats};
use crate::tensor::Tensor;
use crate::whitening::{blend_stats, BatchStats};

/// Per-feature batch normalization with separate source/target statistics.
///
/// Running statistics use the same representation as the whitening layer
/// (one 1×1 group per feature, variance stored with `ε` already added), so a
/// network can swap BN for unit-group whitening without changing its state.
#[derive(Clone)]
pub struct BatchNorm {
    features: usize,
    epsilon: f64,
    momentum: f64,
    pub gamma: Parameter,
    pub beta: Parameter,
    running_source: RunningStats,
    running_target: RunningStats,
    cache: Option<BnCache>,
}

#[derive(Clone)]
struct BnCache {
    mode: Mode,
    spatial: Option<[usize; 4]>,
    xhat: Tensor,
    std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(features: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        if features == 0 || epsilon < 0.0 || !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Param(format!(
                "invalid batch norm: features {features}, epsilon {epsilon}, momentum {momentum}"
            )));
        }
        Ok(BatchNorm {
            features,
            epsilon,
            momentum,
            gamma: Parameter::exempt(Tensor::full(&[features], 1.0)),
            beta: Parameter::exempt(Tensor::zeros(&[features])),
            running_source: RunningStats::default(),
            running_target: RunningStats::default(),
            cache: None,
        })
    }

    fn slot(&mut self, domain: DomainTag) -> &mut RunningStats {
        match domain {
            DomainTag::Source => &mut self.running_source,
            DomainTag::Target => &mut self.running_target,
        }
    }

    pub fn running_stats(&self, domain: DomainTag) -> &RunningStats {
        match domain {
            DomainTag::Source => &self.running_source,
            DomainTag::Target => &self.running_target,
        }
    }

    /// Mean and shifted variance per feature.
    fn batch_moments(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, d) = (x.rows(), self.features);
        if n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "need at least 2 rows for variance, got {n}"
            )));
        }
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                s += x.at(i, j);
            }
            mean[j] = s / n as f64;
            let mut v = 0.0;
            for i in 0..n {
                let c = x.at(i, j) - mean[j];
                v += c * c;
            }
            v /= n as f64;
            v += self.epsilon;
            if !(v > 0.0) {
                v += self.epsilon * 9.0;
            }
            if !(v > 0.0) {
                return Err(Error::NotPositiveDefinite { pivot: j, value: v });
            }
            var[j] = v;
        }
        Ok((mean, var))
    }
}

fn to_groups(mean: &[f64], var: &[f64], count: usize) -> Vec<BatchStats> {
    mean.iter()
        .zip(var)
        .map(|(&m, &v)| BatchStats {
            mu: vec![m],
            sigma: Tensor::full(&[1, 1], v),
            count,
        })
        .collect()
}

impl Layer for BatchNorm {
    fn spec(&self) -> LayerSpec {
        LayerSpec::BatchNorm {
            features: self.features,
            epsilon: self.epsilon,
            momentum: self.momentum,
        }
    }

    fn forward(&mut self, input: &Tensor, mode: Mode, domain: DomainTag) -> Result<Tensor> {
        let (x, spatial) = match input.shape() {
            &[_, d] if d == self.features => (input.clone(), None),
            &[m, c, h, w] if c == self.features => (input.nchw_to_rows(), Some([m, c, h, w])),
            s => {
                return Err(Error::shape(format!(
                    "batch norm over {} features got input {s:?}",
                    self.features
                )))
            }
        };
        let (mean, var) = match mode {
            Mode::Train => {
                let (mean, var) = self.batch_moments(&x)?;
                let fresh = to_groups(&mean, &var, x.rows());
                let rho = self.momentum;
                let slot = self.slot(domain);
                match &mut slot.groups {
                    Some(stored) => blend_stats(stored, &fresh, rho),
                    None => slot.groups = Some(fresh),
                }
                (mean, var)
            }
            Mode::Eval => {
                let groups = self
                    .running_stats(domain)
                    .groups
                    .as_ref()
                    .ok_or(Error::UninitializedStats(domain.name()))?;
                (
                    groups.iter().map(|g| g.mu[0]).collect(),
                    groups.iter().map(|g| g.sigma.data()[0]).collect(),
                )
            }
        };
        let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut xhat = x.clone();
        let mut out = x;
        for i in 0..out.rows() {
            for j in 0..self.features {
                let h = (xhat.at(i, j) - mean[j]) / std[j];
                xhat.set(i, j, h);
                out.set(i, j, gamma[j] * h + beta[j]);
            }
        }
        self.cache = Some(BnCache {
            mode,
            spatial,
            xhat,
            std,
        });
        Ok(match spatial {
            Some([m, c, h, w]) => out.rows_to_nchw(m, c, h, w),
            None => out,
        })
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("batch norm backward without a cached forward".into()))?;
        let dy = match cache.spatial {
            Some(s) if grad_output.shape() == s => grad_output.nchw_to_rows(),
            None if grad_output.shape() == cache.xhat.shape() => grad_output.clone(),
            _ => return Err(Error::shape("batch norm backward gradient shape")),
        };
        let n = dy.rows();
        let d = self.features;
        let gamma = self.gamma.value.data().to_vec();
        let mut dx = Tensor::zeros(dy.shape());
        for j in 0..d {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..n {
                sum_dy += dy.at(i, j);
                sum_dy_xhat += dy.at(i, j) * cache.xhat.at(i, j);
            }
            self.gamma.grad.data_mut()[j] += sum_dy_xhat;
            self.beta.grad.data_mut()[j] += sum_dy;
            let scale = gamma[j] / cache.std[j];
            for i in 0..n {
                let v = match cache.mode {
                    Mode::Eval => scale * dy.at(i, j),
                    Mode::Train => {
                        scale * (dy.at(i, j) - sum_dy / n as f64 - cache.xhat.at(i, j) * sum_dy_xhat / n as f64)
                    }
                };
                dx.set(i, j, v);
            }
        }
        Ok(match cache.spatial {
            Some([m, c, h, w]) => dx.rows_to_nchw(m, c, h, w),
            None => dx,
        })
    }

    fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn running(&self) -> Vec<&RunningStats> {
        vec![&self.running_source, &self.running_target]
    }

    fn running_mut(&mut self) -> Vec<&mut RunningStats> {
        vec![&mut self.running_source, &mut self.running_target]
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
