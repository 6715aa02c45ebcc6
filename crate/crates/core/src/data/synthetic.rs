//! Gaussian class blobs in two domains related by an affine map.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{derive_seed, LabeledSet};
use crate::error::{Error, Result};
use crate::layer::DomainTag;
use crate::linalg::{cholesky_lower, determinant};
use crate::tensor::Tensor;

/// Parameters of the two-domain benchmark.
///
/// Class means sit on a circle of radius `separation` in the first
/// `informative_pairs` coordinate pairs `(2k, 2k+1)`, with a random phase per
/// pair; the remaining coordinates carry noise only. Within-class noise has
/// standard deviation `noise` and correlation `correlation` between features
/// of the same `correlation_block`. Target samples are fresh draws mapped
/// through `x ↦ A x + b` with `A = diag(scales) · R`, where `R` rotates every
/// coordinate pair by `rotation_deg`. `scales` and `translation` are cycled
/// over the coordinates; an empty `translation` means no offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_domain: usize,
    pub noise: f64,
    pub separation: f64,
    pub informative_pairs: usize,
    pub correlation: f64,
    pub correlation_block: usize,
    pub rotation_deg: f64,
    pub scales: Vec<f64>,
    pub translation: Vec<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 3,
            dim: 8,
            n_per_domain: 2000,
            noise: 0.3,
            separation: 1.0,
            informative_pairs: 1,
            correlation: 0.8,
            correlation_block: 4,
            rotation_deg: 30.0,
            scales: vec![3.0, 0.4],
            translation: vec![],
        }
    }
}

impl SyntheticSpec {
    /// Same distribution in both domains.
    pub fn no_shift(self) -> Self {
        SyntheticSpec {
            rotation_deg: 0.0,
            scales: vec![1.0],
            translation: vec![],
            ..self
        }
    }

    pub fn shift_matrix(&self) -> Tensor {
        let d = self.dim;
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let mut a = Tensor::eye(d);
        for k in 0..d / 2 {
            let (i, j) = (2 * k, 2 * k + 1);
            a.set(i, i, c);
            a.set(i, j, -s);
            a.set(j, i, s);
            a.set(j, j, c);
        }
        if !self.scales.is_empty() {
            for i in 0..d {
                let f = self.scales[i % self.scales.len()];
                for j in 0..d {
                    a.set(i, j, a.at(i, j) * f);
                }
            }
        }
        a
    }

    pub fn translation_vec(&self) -> Vec<f64> {
        if self.translation.is_empty() {
            return vec![0.0; self.dim];
        }
        (0..self.dim)
            .map(|i| self.translation[i % self.translation.len()])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.n_per_domain == 0 {
            return Err(Error::Param(format!(
                "synthetic data needs ≥ 2 classes and positive dim and size, got C={} d={} n={}",
                self.classes, self.dim, self.n_per_domain
            )));
        }
        if self.informative_pairs == 0 || 2 * self.informative_pairs > self.dim {
            return Err(Error::Param(format!(
                "{} informative pairs do not fit in {} dimensions",
                self.informative_pairs, self.dim
            )));
        }
        if !(self.noise >= 0.0) || self.correlation_block == 0 {
            return Err(Error::Param("noise must be ≥ 0 and correlation_block ≥ 1".into()));
        }
        if !(-1.0..1.0).contains(&self.correlation) {
            return Err(Error::Param(format!(
                "correlation {} outside (-1, 1)",
                self.correlation
            )));
        }
        let det = determinant(&self.shift_matrix())?;
        if !(det.abs() > 1e-12) {
            return Err(Error::Param(format!("shift matrix is singular (det {det:e})")));
        }
        Ok(())
    }

    fn class_means(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let phases: Vec<f64> = (0..self.informative_pairs)
            .map(|_| rng.random::<f64>() * 2.0 * PI)
            .collect();
        (0..self.classes)
            .map(|c| {
                let mut mu = vec![0.0; self.dim];
                for (k, phi) in phases.iter().enumerate() {
                    let t = 2.0 * PI * c as f64 / self.classes as f64 + phi;
                    mu[2 * k] = self.separation * t.cos();
                    mu[2 * k + 1] = self.separation * t.sin();
                }
                mu
            })
            .collect()
    }

    /// Cholesky factor of the within-class correlation matrix.
    fn noise_factor(&self) -> Result<Tensor> {
        let d = self.dim;
        let b = self.correlation_block;
        let mut k = Tensor::eye(d);
        for i in 0..d {
            for j in 0..d {
                if i != j && i / b == j / b {
                    k.set(i, j, self.correlation);
                }
            }
        }
        cholesky_lower(&k).map_err(|e| Error::Param(format!("class covariance: {e}")))
    }
}

fn draw(spec: &SyntheticSpec, means: &[Vec<f64>], factor: &Tensor, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let (n, d) = (spec.n_per_domain, spec.dim);
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(rng);
    let mut x = Tensor::zeros(&[n, d]);
    let mut z = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let row = x.row_mut(i);
        for r in 0..d {
            let mut e = 0.0;
            for c in 0..=r {
                e += factor.at(r, c) * z[c];
            }
            row[r] = means[y][r] + spec.noise * e;
        }
    }
    (x, labels)
}

/// Generate `(source, target)` sets. Equal seeds give bitwise-equal data.
pub fn gen_synthetic_shift(spec: &SyntheticSpec, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0]));
    let means = spec.class_means(&mut rng);
    let factor = spec.noise_factor()?;

    let (xs, ys) = draw(spec, &means, &factor, &mut rng);
    let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1]));
    let (raw, yt) = draw(spec, &means, &factor, &mut trng);

    let a = spec.shift_matrix();
    let b = spec.translation_vec();
    let d = spec.dim;
    let mut xt = Tensor::zeros(raw.shape());
    for i in 0..raw.rows() {
        let src = raw.row(i);
        let dst = xt.row_mut(i);
        for r in 0..d {
            let mut v = b[r];
            for c in 0..d {
                v += a.at(r, c) * src[c];
            }
            dst[r] = v;
        }
    }
    Ok((
        LabeledSet::new(xs, ys, spec.classes, DomainTag::Source)?,
        LabeledSet::new(xt, yt, spec.classes, DomainTag::Target)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_per_domain: 600,
            ..SyntheticSpec::default()
        }
    }

    fn column_means(x: &Tensor) -> Vec<f64> {
        let n = x.rows() as f64;
        (0..x.cols())
            .map(|j| (0..x.rows()).map(|i| x.at(i, j)).sum::<f64>() / n)
            .collect()
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let (s1, t1) = gen_synthetic_shift(&small(), 9).unwrap();
        let (s2, t2) = gen_synthetic_shift(&small(), 9).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        let (s3, _) = gen_synthetic_shift(&small(), 10).unwrap();
        assert_ne!(s1.inputs, s3.inputs);
    }

    #[test]
    fn balanced_labels_and_domains() {
        let (s, t) = gen_synthetic_shift(&small(), 1).unwrap();
        assert_eq!(s.domain, DomainTag::Source);
        assert_eq!(t.domain, DomainTag::Target);
        for c in 0..3 {
            assert_eq!(s.labels.iter().filter(|&&y| y == c).count(), 200);
        }
        assert_eq!(s.sample_shape(), &[8]);
    }

    #[test]
    fn no_shift_control_matches_moments() {
        let spec = SyntheticSpec {
            n_per_domain: 6000,
            ..SyntheticSpec::default()
        }
        .no_shift();
        let (s, t) = gen_synthetic_shift(&spec, 3).unwrap();
        for (a, b) in column_means(&s.inputs).iter().zip(column_means(&t.inputs)) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn shift_matrix_is_scaled_rotation() {
        let spec = SyntheticSpec {
            dim: 2,
            rotation_deg: 90.0,
            scales: vec![2.0, 3.0],
            ..SyntheticSpec::default()
        };
        let a = spec.shift_matrix();
        let want = [0.0, -2.0, 3.0, 0.0];
        for (x, y) in a.data().iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn target_is_affine_image_of_source_distribution() {
        let spec = SyntheticSpec {
            n_per_domain: 6000,
            translation: vec![0.5, -1.0],
            ..SyntheticSpec::default()
        };
        let (s, t) = gen_synthetic_shift(&spec, 4).unwrap();
        let a = spec.shift_matrix();
        let ms = column_means(&s.inputs);
        let mt = column_means(&t.inputs);
        let b = spec.translation_vec();
        for r in 0..spec.dim {
            let want: f64 = b[r] + (0..spec.dim).map(|c| a.at(r, c) * ms[c]).sum::<f64>();
            assert!((mt[r] - want).abs() < 0.05, "{} vs {want}", mt[r]);
        }
    }

    #[test]
    fn within_block_correlation() {
        let spec = SyntheticSpec {
            n_per_domain: 20000,
            correlation: 0.8,
            ..SyntheticSpec::default()
        };
        let (s, _) = gen_synthetic_shift(&spec, 5).unwrap();
        // residuals around class means
        let mut sums = vec![vec![0.0; 8]; 3];
        let mut counts = [0.0; 3];
        for i in 0..s.len() {
            counts[s.labels[i]] += 1.0;
            for j in 0..8 {
                sums[s.labels[i]][j] += s.inputs.at(i, j);
            }
        }
        let resid = |i: usize, j: usize| s.inputs.at(i, j) - sums[s.labels[i]][j] / counts[s.labels[i]];
        let corr = |a: usize, b: usize| {
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for i in 0..s.len() {
                sab += resid(i, a) * resid(i, b);
                saa += resid(i, a) * resid(i, a);
                sbb += resid(i, b) * resid(i, b);
            }
            sab / (saa * sbb).sqrt()
        };
        assert!((corr(0, 3) - 0.8).abs() < 0.02);
        assert!((corr(4, 5) - 0.8).abs() < 0.02);
        assert!(corr(3, 4).abs() < 0.03);
    }

    #[test]
    fn invalid_specs() {
        let singular = SyntheticSpec {
            scales: vec![1.0, 0.0],
            ..SyntheticSpec::default()
        };
        assert!(matches!(gen_synthetic_shift(&singular, 0), Err(Error::Param(_))));
        let bad_corr = SyntheticSpec {
            correlation: 1.0,
            ..SyntheticSpec::default()
        };
        assert!(gen_synthetic_shift(&bad_corr, 0).is_err());
        let one_class = SyntheticSpec {
            classes: 1,
            ..SyntheticSpec::default()
        };
        assert!(gen_synthetic_shift(&one_class, 0).is_err());
    }
}
