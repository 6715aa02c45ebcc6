//! Random affine warps, Gaussian blur and feature jitter.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LabeledSet;
use crate::error::{Error, Result};

/// Perturbation ranges. Image samples (`c×h×w`) get a random affine warp
/// followed by a blur and clamping to `[0, 1]`; flat feature vectors get
/// additive Gaussian noise of standard deviation `feature_noise`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSpec {
    /// Maximum shift as a fraction of height/width.
    pub max_translation: f64,
    pub blur_sigma: f64,
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shear_deg: f64,
    pub feature_noise: f64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec {
            max_translation: 0.05,
            blur_sigma: 0.1,
            rotation_deg: 10.0,
            scale_min: 0.9,
            scale_max: 1.1,
            shear_deg: 5.0,
            feature_noise: 0.05,
        }
    }
}

impl PerturbSpec {
    /// The identity perturbation.
    pub fn none() -> Self {
        PerturbSpec {
            max_translation: 0.0,
            blur_sigma: 0.0,
            rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            shear_deg: 0.0,
            feature_noise: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == PerturbSpec::none()
    }

    pub fn validate(&self) -> Result<()> {
        let magnitudes = [
            self.max_translation,
            self.blur_sigma,
            self.rotation_deg,
            self.shear_deg,
            self.feature_noise,
        ];
        if magnitudes.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Param("perturbation magnitudes must be ≥ 0".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Param(format!(
                "scale range [{}, {}] must be positive and ordered",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }

    /// Draw one warp. Parameters with a zero range are not sampled, so the
    /// identity spec consumes no randomness.
    pub fn sample_affine<R: Rng>(&self, rng: &mut R, h: usize, w: usize) -> AffineParams {
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let tx = sym(self.max_translation * w as f64);
        let ty = sym(self.max_translation * h as f64);
        let rotation_deg = sym(self.rotation_deg);
        let shear_deg = sym(self.shear_deg);
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        AffineParams {
            tx,
            ty,
            rotation_deg,
            scale,
            shear_deg,
        }
    }
}

/// A warp about the image centre: `p' = R·Sh·S·(p − c) + c + t`, where `tx`
/// moves content right (columns) and `ty` down (rows).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub tx: f64,
    pub ty: f64,
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_deg: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            tx: 0.0,
            ty: 0.0,
            rotation_deg: 0.0,
            scale: 1.0,
            shear_deg: 0.0,
        }
    }

    /// Forward 2×2 matrix acting on `(x, y)` = `(column, row)`.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let z = self.scale;
        // R · [[1, k], [0, 1]] · zI
        [[c * z, (c * k - s) * z], [s * z, (s * k + c) * z]]
    }
}

/// Warp each `h×w` channel of `image` by inverse mapping with bilinear
/// interpolation; samples falling outside the image read as zero.
pub fn apply_affine(image: &[f64], channels: usize, h: usize, w: usize, p: &AffineParams) -> Vec<f64> {
    let m = p.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let at = |plane: &[f64], r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            plane[r as usize * w + c as usize]
        }
    };
    let mut out = vec![0.0; image.len()];
    for ch in 0..channels {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                let dx = c as f64 - cx - p.tx;
                let dy = r as f64 - cy - p.ty;
                let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
                let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                dst[r * w + c] = (1.0 - fy) * ((1.0 - fx) * at(plane, y0, x0) + fx * at(plane, y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(plane, y0 + 1, x0) + fx * at(plane, y0 + 1, x0 + 1));
            }
        }
    }
    out
}

/// Normalized Gaussian taps over `[-⌈3σ⌉, ⌈3σ⌉]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(image: &[f64], channels: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return image.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; image.len()];
    let mut out = vec![0.0; image.len()];
    for ch in 0..channels {
        let base = ch * h * w;
        for r in 0..h {
            for c in 0..w {
                tmp[base + r * w + c] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * image[base + r * w + clamp(c as isize + t as isize - radius, w)])
                    .sum();
            }
        }
        for r in 0..h {
            for c in 0..w {
                out[base + r * w + c] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * tmp[base + clamp(r as isize + t as isize - radius, h) * w + c])
                    .sum();
            }
        }
    }
    out
}

/// Perturb one sample of shape `shape` (without the batch axis).
pub fn perturb_sample<R: Rng>(sample: &[f64], shape: &[usize], spec: &PerturbSpec, rng: &mut R) -> Vec<f64> {
    match *shape {
        [c, h, w] => {
            let params = spec.sample_affine(rng, h, w);
            let mut out = if params == AffineParams::identity() {
                sample.to_vec()
            } else {
                apply_affine(sample, c, h, w, &params)
            };
            if spec.blur_sigma > 0.0 {
                out = gaussian_blur(&out, c, h, w, spec.blur_sigma);
            }
            if !spec.is_identity() {
                for v in &mut out {
                    *v = v.clamp(0.0, 1.0);
                }
            }
            out
        }
        _ => {
            if spec.feature_noise > 0.0 {
                sample
                    .iter()
                    .map(|&v| v + spec.feature_noise * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            } else {
                sample.to_vec()
            }
        }
    }
}

/// Warp every image of `set` by the same affine map. Non-image sets are
/// returned unchanged.
pub fn apply_affine_to_set(set: &LabeledSet, params: &AffineParams) -> LabeledSet {
    let &[c, h, w] = set.sample_shape() else {
        return set.clone();
    };
    let rows = crate::par::map_indexed(set.len(), |i| apply_affine(set.inputs.row(i), c, h, w, params));
    let mut out = set.clone();
    for (i, r) in rows.into_iter().enumerate() {
        out.inputs.row_mut(i).copy_from_slice(&r);
    }
    out
}
