//! Parameter-free layers: ReLU, max-pooling and flattening.

use std::any::Any;

use crate::error::{Error, Result};
use crate::layer::{DomainTag, Layer, LayerSpec, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
    shape: Vec<usize>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Relu
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode, _domain: DomainTag) -> Result<Tensor> {
        self.mask = Some(input.data().iter().map(|&v| v > 0.0).collect());
        self.shape = input.shape().to_vec();
        Ok(input.map(|v| if v > 0.0 { v } else { 0.0 }))
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::State("relu backward without a cached forward".into()))?;
        if grad_output.shape() != self.shape.as_slice() {
            return Err(Error::shape("relu backward gradient shape"));
        }
        let data = grad_output
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &on)| if on { g } else { 0.0 })
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Non-overlapping `size×size` max-pooling over `m×c×h×w` maps. Trailing rows
/// and columns that do not fill a window are dropped. Ties pick the first
/// maximal element in row-major order.
#[derive(Clone)]
pub struct MaxPool2d {
    size: usize,
    argmax: Option<Vec<usize>>,
    input_shape: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Param("pool size must be positive".into()));
        }
        Ok(MaxPool2d {
            size,
            argmax: None,
            input_shape: Vec::new(),
        })
    }
}

impl Layer for MaxPool2d {
    fn spec(&self) -> LayerSpec {
        LayerSpec::MaxPool { size: self.size }
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode, _domain: DomainTag) -> Result<Tensor> {
        let &[m, c, h, w] = input.shape() else {
            return Err(Error::shape(format!(
                "maxpool expects m×c×h×w, got {:?}",
                input.shape()
            )));
        };
        let k = self.size;
        let (oh, ow) = (h / k, w / k);
        if oh == 0 || ow == 0 {
            return Err(Error::shape(format!("maxpool {k} on {h}x{w} map")));
        }
        let x = input.data();
        let mut out = Vec::with_capacity(m * c * oh * ow);
        let mut idx = Vec::with_capacity(m * c * oh * ow);
        for plane in 0..m * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let p = base + (oy * k + dy) * w + ox * k + dx;
                            if x[p] > x[best] {
                                best = p;
                            }
                        }
                    }
                    out.push(x[best]);
                    idx.push(best);
                }
            }
        }
        self.argmax = Some(idx);
        self.input_shape = input.shape().to_vec();
        Tensor::new(vec![m, c, oh, ow], out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let idx = self
            .argmax
            .take()
            .ok_or_else(|| Error::State("maxpool backward without a cached forward".into()))?;
        if grad_output.len() != idx.len() {
            return Err(Error::shape("maxpool backward gradient shape"));
        }
        let mut dx = Tensor::zeros(&self.input_shape);
        for (&p, &g) in idx.iter().zip(grad_output.data()) {
            dx.data_mut()[p] += g;
        }
        Ok(dx)
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// `m×…` to `m×(product of the rest)`.
#[derive(Clone, Default)]
pub struct Flatten {
    input_shape: Vec<usize>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Flatten {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Flatten
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode, _domain: DomainTag) -> Result<Tensor> {
        self.input_shape = input.shape().to_vec();
        input.clone().reshape(&[input.rows(), input.row_len()])
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        if self.input_shape.is_empty() {
            return Err(Error::State("flatten backward without a cached forward".into()));
        }
        let shape = std::mem::take(&mut self.input_shape);
        grad_output.clone().reshape(&shape)
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_masks_non_positive() {
        let mut r = Relu::new();
        let x = Tensor::new(vec![1, 4], vec![-1.0, 0.0, 2.0, 3.0]).unwrap();
        let y = r.forward(&x, Mode::Train, DomainTag::Source).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 3.0]);
        let g = r.backward(&Tensor::full(&[1, 4], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0]);
        assert!(r.backward(&Tensor::full(&[1, 4], 1.0)).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut p = MaxPool2d::new(2).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap();
        let y = p.forward(&x, Mode::Train, DomainTag::Source).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let g = p.backward(&Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        assert_eq!(g.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_drops_ragged_edge() {
        let mut p = MaxPool2d::new(2).unwrap();
        let x = Tensor::new(vec![1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let y = p.forward(&x, Mode::Train, DomainTag::Source).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn flatten_round_trip() {
        let mut f = Flatten::new();
        let x = Tensor::new(vec![2, 2, 1, 3], (0..12).map(f64::from).collect()).unwrap();
        let y = f.forward(&x, Mode::Eval, DomainTag::Target).unwrap();
        assert_eq!(y.shape(), &[2, 6]);
        assert_eq!(f.backward(&y).unwrap(), x);
    }
}
