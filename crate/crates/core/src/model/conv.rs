//! 2-D cross-correlation via im2col: each sample's receptive fields are laid
//! out as columns so the forward pass is one matrix product and the backward
//! pass two transposed products.

use std::any::Any;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layer::{DomainTag, Layer, LayerSpec, Mode, Padding, Parameter};
use crate::model::dense::he_uniform;
use crate::par;
use crate::tensor::{matmul, matmul_seq, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfold one `c×h×w` sample into a `(c·k·k)×(oh·ow)` matrix; zero outside the image.
pub fn im2col(sample: &[f64], g: &ConvGeometry) -> Tensor {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut cols = vec![0.0; g.patch_len() * oh * ow];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if x < 0 || x >= g.width as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = sample[(c * g.height + y as usize) * g.width + x as usize];
                    }
                }
            }
        }
    }
    Tensor::matrix(g.patch_len(), oh * ow, cols).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a `c×h×w` sample.
pub fn col2im(cols: &Tensor, g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut out = vec![0.0; g.channels * g.height * g.width];
    let data = cols.data();
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &data[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if x < 0 || x >= g.width as isize {
                            continue;
                        }
                        out[(c * g.height + y as usize) * g.width + x as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone)]
pub struct Conv2d {
    /// `out_channels × (in_channels·k·k)`.
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
    parallel: bool,
    cache: Option<(ConvGeometry, usize, Vec<Tensor>)>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::Param("conv2d sizes must be positive".into()));
        }
        let fan_in = in_channels * kernel * kernel;
        let w = Tensor::matrix(out_channels, fan_in, he_uniform(rng, fan_in, out_channels * fan_in))?;
        Ok(Conv2d {
            weight: Parameter::new(w),
            bias: bias.then(|| Parameter::new(Tensor::zeros(&[out_channels]))),
            in_channels,
            kernel,
            stride,
            padding,
            parallel: true,
            cache: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.rows()
    }

    /// Per-sample work is spread across threads when the `parallel` feature is
    /// on; this switch forces the sequential path (used by the benchmarks).
    pub fn set_parallel(&mut self, on: bool) {
        self.parallel = on;
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<ConvGeometry> {
        let pad = match self.padding {
            Padding::Valid => 0,
            Padding::Same => self.kernel / 2,
        };
        if height + 2 * pad < self.kernel || width + 2 * pad < self.kernel {
            return Err(Error::shape(format!(
                "kernel {} larger than padded {height}x{width} input",
                self.kernel
            )));
        }
        Ok(ConvGeometry {
            channels: self.in_channels,
            height,
            width,
            kernel: self.kernel,
            stride: self.stride,
            pad,
        })
    }

    fn map_samples<T: Send>(&self, m: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        if self.parallel {
            par::map_indexed(m, f)
        } else {
            par::map_indexed_seq(m, f)
        }
    }
}

impl Layer for Conv2d {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels(),
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            bias: self.bias.is_some(),
        }
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode, _domain: DomainTag) -> Result<Tensor> {
        let &[m, c, h, w] = input.shape() else {
            return Err(Error::shape(format!("conv2d expects m×c×h×w, got {:?}", input.shape())));
        };
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv2d with {} input channels got {c}",
                self.in_channels
            )));
        }
        let g = self.geometry(h, w)?;
        let (oh, ow) = (g.out_height(), g.out_width());
        let co = self.out_channels();
        let weight = &self.weight.value;
        let bias = self.bias.as_ref().map(|b| b.value.data());
        let parallel = self.parallel;
        let per_sample = self.map_samples(m, |n| -> Result<(Tensor, Tensor)> {
            let cols = im2col(input.row(n), &g);
            let mut out = if parallel {
                matmul(weight, &cols)?
            } else {
                matmul_seq(weight, &cols)?
            };
            if let Some(b) = bias {
                for (o, &bv) in out.data_mut().chunks_mut(oh * ow).zip(b) {
                    o.iter_mut().for_each(|v| *v += bv);
                }
            }
            Ok((cols, out))
        });
        let mut data = Vec::with_capacity(m * co * oh * ow);
        let mut cols_cache = Vec::with_capacity(m);
        for r in per_sample {
            let (cols, out) = r?;
            data.extend_from_slice(out.data());
            cols_cache.push(cols);
        }
        self.cache = Some((g, m, cols_cache));
        Tensor::new(vec![m, co, oh, ow], data)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let (g, m, cols) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("conv2d backward without a cached forward".into()))?;
        let co = self.out_channels();
        let (oh, ow) = (g.out_height(), g.out_width());
        if grad_output.shape() != [m, co, oh, ow] {
            return Err(Error::shape(format!(
                "conv2d backward got gradient {:?}",
                grad_output.shape()
            )));
        }
        let weight = &self.weight.value;
        let per_sample = self.map_samples(m, |n| -> Result<(Tensor, Vec<f64>)> {
            let dout = Tensor::matrix(co, oh * ow, grad_output.row(n).to_vec())?;
            let dw = matmul(&dout, &cols[n].transpose())?;
            let dcols = matmul_tn(weight, &dout)?;
            Ok((dw, col2im(&dcols, &g)))
        });
        let mut dx = Vec::with_capacity(m * g.channels * g.height * g.width);
        for r in per_sample {
            let (dw, dxn) = r?;
            self.weight.grad.add_assign(&dw)?;
            dx.extend_from_slice(&dxn);
        }
        if let Some(b) = &mut self.bias {
            let db = b.grad.data_mut();
            for n in 0..m {
                for (acc, chunk) in db.iter_mut().zip(grad_output.row(n).chunks(oh * ow)) {
                    *acc += chunk.iter().sum::<f64>();
                }
            }
        }
        Tensor::new(vec![m, g.channels, g.height, g.width], dx)
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
