//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "DWTCKPT\0" | version u32 | variant: u32 len + utf-8
//! classes u64 | input rank u32 + dims u64…
//! layer count u32 | per layer: kind u8 + fields
//! parameter count u32 | per parameter: rank u32, dims u64…, values f64…
//! stats count u32 | per slot: present u8 [groups u32 | per group: g u32, count u64, μ f64×g, Σ f64×g²]
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{LayerSpec, Padding, RunningStats};
use crate::model::Network;
use crate::tensor::Tensor;
use crate::whitening::BatchStats;

pub const MAGIC: &[u8; 8] = b"DWTCKPT\0";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    /// Name of the training variant that produced the network.
    pub variant: String,
    pub network: Network,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Format {
                offset: self.pos,
                message: format!("truncated: need {n} more bytes"),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| self.err(format!("value {v} too large")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > self.bytes.len() {
            return Err(self.err(format!("implausible length {n}")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            message: message.into(),
        }
    }
}

fn write_spec(w: &mut Writer, spec: &LayerSpec) {
    match *spec {
        LayerSpec::Dense { fan_in, fan_out, bias } => {
            w.u8(0);
            w.u64(fan_in);
            w.u64(fan_out);
            w.u8(bias as u8);
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => {
            w.u8(1);
            w.u64(in_channels);
            w.u64(out_channels);
            w.u64(kernel);
            w.u64(stride);
            w.u8(matches!(padding, Padding::Same) as u8);
            w.u8(bias as u8);
        }
        LayerSpec::Relu => w.u8(2),
        LayerSpec::MaxPool { size } => {
            w.u8(3);
            w.u64(size);
        }
        LayerSpec::Flatten => w.u8(4),
        LayerSpec::BatchNorm {
            features,
            epsilon,
            momentum,
        } => {
            w.u8(5);
            w.u64(features);
            w.f64(epsilon);
            w.f64(momentum);
        }
        LayerSpec::Dwt {
            features,
            group_size,
            epsilon,
            momentum,
        } => {
            w.u8(6);
            w.u64(features);
            w.u64(group_size);
            w.f64(epsilon);
            w.f64(momentum);
        }
    }
}

fn read_spec(r: &mut Reader) -> Result<LayerSpec> {
    let at = r.pos;
    Ok(match r.u8()? {
        0 => LayerSpec::Dense {
            fan_in: r.u64()?,
            fan_out: r.u64()?,
            bias: r.u8()? != 0,
        },
        1 => LayerSpec::Conv2d {
            in_channels: r.u64()?,
            out_channels: r.u64()?,
            kernel: r.u64()?,
            stride: r.u64()?,
            padding: if r.u8()? != 0 { Padding::Same } else { Padding::Valid },
            bias: r.u8()? != 0,
        },
        2 => LayerSpec::Relu,
        3 => LayerSpec::MaxPool { size: r.u64()? },
        4 => LayerSpec::Flatten,
        5 => LayerSpec::BatchNorm {
            features: r.u64()?,
            epsilon: r.f64()?,
            momentum: r.f64()?,
        },
        6 => LayerSpec::Dwt {
            features: r.u64()?,
            group_size: r.u64()?,
            epsilon: r.f64()?,
            momentum: r.f64()?,
        },
        k => {
            return Err(Error::Format {
                offset: at,
                message: format!("unknown layer kind {k}"),
            })
        }
    })
}

pub fn encode(variant: &str, net: &Network) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION as usize);
    w.u32(variant.len());
    w.0.extend_from_slice(variant.as_bytes());
    w.u64(net.classes());
    w.u32(net.input_shape().len());
    for &d in net.input_shape() {
        w.u64(d);
    }
    let specs = net.specs();
    w.u32(specs.len());
    for s in &specs {
        write_spec(&mut w, s);
    }
    let params = net.params();
    w.u32(params.len());
    for p in params {
        w.u32(p.value.rank());
        for &d in p.value.shape() {
            w.u64(d);
        }
        w.f64s(p.value.data());
    }
    let running = net.running();
    w.u32(running.len());
    for slot in running {
        match &slot.groups {
            None => w.u8(0),
            Some(groups) => {
                w.u8(1);
                w.u32(groups.len());
                for g in groups {
                    w.u32(g.group_size());
                    w.u64(g.count);
                    w.f64s(&g.mu);
                    w.f64s(g.sigma.data());
                }
            }
        }
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| r.err("missing magic"))? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let variant = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.err("variant is not utf-8"))?;
    let classes = r.u64()?;
    let rank = r.u32()?;
    let input_shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let n_layers = r.u32()?;
    let specs = (0..n_layers).map(|_| read_spec(&mut r)).collect::<Result<Vec<_>>>()?;
    let mut net = Network::from_specs(&input_shape, &specs, classes, 0)?;

    let n_params = r.u32()?;
    if n_params != net.params().len() {
        return Err(r.err(format!("{n_params} parameters for {} slots", net.params().len())));
    }
    for p in net.params_mut() {
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(r.err(format!("parameter shape {shape:?}, expected {:?}", p.value.shape())));
        }
        p.value = Tensor::new(shape, r.f64s(p.value.len())?)?;
    }
    let n_stats = r.u32()?;
    if n_stats != net.running().len() {
        return Err(r.err(format!("{n_stats} statistic slots, expected {}", net.running().len())));
    }
    let mut slots = Vec::with_capacity(n_stats);
    for _ in 0..n_stats {
        slots.push(match r.u8()? {
            0 => RunningStats::default(),
            _ => {
                let groups = r.u32()?;
                let mut stats = Vec::with_capacity(groups.min(bytes.len()));
                for _ in 0..groups {
                    let g = r.u32()?;
                    let count = r.u64()?;
                    let mu = r.f64s(g)?;
                    let sigma = Tensor::new(vec![g, g], r.f64s(g * g)?)?;
                    stats.push(BatchStats { mu, sigma, count });
                }
                RunningStats { groups: Some(stats) }
            }
        });
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    for (dst, src) in net.running_mut().into_iter().zip(slots) {
        *dst = src;
    }
    Ok(Checkpoint { variant, network: net })
}

pub fn save(path: &Path, variant: &str, net: &Network) -> Result<()> {
    fs::write(path, encode(variant, net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
