//! Dense row-major `f64` tensors and the matrix products the layers need.

use std::fmt;

use crate::error::{Error, Result};
use crate::par;

/// Products with fewer multiply-adds than this stay on the calling thread.
const PAR_MATMUL_MIN_WORK: usize = 1 << 15;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on an empty or zero-sized shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::matrix(r, c, rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the leading (batch) axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Elements per leading-axis slice.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max-abs elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack two tensors along the leading axis.
    pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape[1..] != b.shape[1..] {
            return Err(Error::shape(format!("concat {:?} with {:?}", a.shape, b.shape)));
        }
        let mut shape = a.shape.clone();
        shape[0] += b.shape[0];
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor { shape, data })
    }

    /// Split along the leading axis into `[0, at)` and `[at, rows)`.
    pub fn split_rows(&self, at: usize) -> Result<(Tensor, Tensor)> {
        if at == 0 || at >= self.rows() {
            return Err(Error::shape(format!("split at {at} of {} rows", self.rows())));
        }
        let w = self.row_len();
        let mut s1 = self.shape.clone();
        s1[0] = at;
        let mut s2 = self.shape.clone();
        s2[0] = self.rows() - at;
        Ok((
            Tensor {
                shape: s1,
                data: self.data[..at * w].to_vec(),
            },
            Tensor {
                shape: s2,
                data: self.data[at * w..].to_vec(),
            },
        ))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape, data }
    }

    /// Copy of columns `[start, start + width)` of a matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Tensor {
            shape: vec![r, width],
            data,
        }
    }

    pub fn set_column_block(&mut self, start: usize, block: &Tensor) {
        let (r, c) = (self.shape[0], self.shape[1]);
        let w = block.shape[1];
        for i in 0..r {
            self.data[i * c + start..i * c + start + w].copy_from_slice(&block.data[i * w..(i + 1) * w]);
        }
    }

    /// `m×c×h×w` feature map to `(m·h·w)×c` rows, one row per spatial site.
    pub fn nchw_to_rows(&self) -> Tensor {
        let (m, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let hw = h * w;
        let mut data = vec![0.0; self.data.len()];
        for n in 0..m {
            for ch in 0..c {
                let src = &self.data[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                for (p, &v) in src.iter().enumerate() {
                    data[(n * hw + p) * c + ch] = v;
                }
            }
        }
        Tensor {
            shape: vec![m * hw, c],
            data,
        }
    }

    /// Inverse of [`Tensor::nchw_to_rows`].
    pub fn rows_to_nchw(&self, m: usize, c: usize, h: usize, w: usize) -> Tensor {
        let hw = h * w;
        let mut data = vec![0.0; self.data.len()];
        for n in 0..m {
            for p in 0..hw {
                let src = &self.data[(n * hw + p) * c..(n * hw + p + 1) * c];
                for (ch, &v) in src.iter().enumerate() {
                    data[(n * c + ch) * hw + p] = v;
                }
            }
        }
        Tensor {
            shape: vec![m, c, h, w],
            data,
        }
    }
}

fn check_matmul(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (m, k) = a.require_matrix("matmul lhs")?;
    let (k2, n) = b.require_matrix("matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {m}x{k} by {k2}x{n}"
        )));
    }
    Ok((m, k, n))
}

#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for (p, &av) in a_row.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// Matrix product `a·b`, splitting output rows across threads for large
/// problems when the `parallel` feature is on.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a, b)?;
    if !par::is_parallel() || m * k * n < PAR_MATMUL_MIN_WORK || m < 2 {
        return matmul_seq(a, b);
    }
    let mut out = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        matmul_row(&a.data[i * k..(i + 1) * k], &b.data, n, row);
    });
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Single-threaded matrix product; same summation order as [`matmul`].
pub fn matmul_seq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a, b)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        matmul_row(&a.data[i * k..(i + 1) * k], &b.data, n, &mut out[i * n..(i + 1) * n]);
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ·b` without materializing the transpose of a large left operand.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ka, m) = a.require_matrix("matmul_tn lhs")?;
    let (kb, n) = b.require_matrix("matmul_tn rhs")?;
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul_tn leading dimensions disagree: {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..ka {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a·bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(a, &b.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&mut rng, 64, 80);
        let b = random(&mut rng, 80, 48);
        assert_eq!(matmul(&a, &b).unwrap(), matmul_seq(&a, &b).unwrap());
    }

    #[test]
    fn transposed_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 6, 4);
        let b = random(&mut rng, 6, 3);
        let want = matmul(&a.transpose(), &b).unwrap();
        assert!(matmul_tn(&a, &b).unwrap().max_abs_diff(&want) < 1e-14);
        let c = random(&mut rng, 5, 4);
        let want = matmul(&a, &c.transpose()).unwrap();
        assert!(matmul_nt(&a, &c).unwrap().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_construction() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn nchw_round_trip() {
        let t = Tensor::new(vec![2, 3, 2, 2], (0..24).map(f64::from).collect()).unwrap();
        let rows = t.nchw_to_rows();
        assert_eq!(rows.shape(), &[8, 3]);
        // sample 0, site 1: channels 0..3 sit at offsets 1, 5, 9
        assert_eq!(rows.row(1), &[1.0, 5.0, 9.0]);
        assert_eq!(rows.rows_to_nchw(2, 3, 2, 2), t);
    }

    #[test]
    fn split_and_concat() {
        let t = Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap();
        let (a, b) = t.split_rows(1).unwrap();
        assert_eq!(a.shape(), &[1, 2]);
        assert_eq!(Tensor::concat_rows(&a, &b).unwrap(), t);
    }
}
