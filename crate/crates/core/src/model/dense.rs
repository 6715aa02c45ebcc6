use std::any::Any;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layer::{DomainTag, Layer, LayerSpec, Mode, Parameter};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Fully connected layer `y = x·W + b` with `W` stored `fan_in×fan_out`.
#[derive(Clone)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    input: Option<Tensor>,
}

/// He-uniform draw: `U(−√(6/fan_in), √(6/fan_in))`.
pub(crate) fn he_uniform(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

impl Dense {
    pub fn new(fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let w = Tensor::matrix(fan_in, fan_out, he_uniform(rng, fan_in, fan_in * fan_out))?;
        Ok(Dense {
            weight: Parameter::new(w),
            bias: bias.then(|| Parameter::new(Tensor::zeros(&[fan_out]))),
            input: None,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

impl Layer for Dense {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dense {
            fan_in: self.fan_in(),
            fan_out: self.fan_out(),
            bias: self.bias.is_some(),
        }
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode, _domain: DomainTag) -> Result<Tensor> {
        if input.rank() != 2 || input.cols() != self.fan_in() {
            return Err(Error::shape(format!(
                "dense {}→{} got input {:?}",
                self.fan_in(),
                self.fan_out(),
                input.shape()
            )));
        }
        let mut out = matmul(input, &self.weight.value)?;
        if let Some(b) = &self.bias {
            for i in 0..out.rows() {
                for (o, bv) in out.row_mut(i).iter_mut().zip(b.value.data()) {
                    *o += bv;
                }
            }
        }
        self.input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State("dense backward without a cached forward".into()))?;
        if grad_output.shape() != [x.rows(), self.fan_out()] {
            return Err(Error::shape(format!(
                "dense backward got gradient {:?}",
                grad_output.shape()
            )));
        }
        self.weight.grad.add_assign(&matmul_tn(&x, grad_output)?)?;
        if let Some(b) = &mut self.bias {
            let db = b.grad.data_mut();
            for i in 0..grad_output.rows() {
                for (acc, g) in db.iter_mut().zip(grad_output.row(i)) {
                    *acc += g;
                }
            }
        }
        matmul_nt(grad_output, &self.weight.value)
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
