//! Cholesky factorization and triangular solves for small dense matrices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-9;

fn require_square(a: &Tensor, what: &str) -> Result<usize> {
    let (r, c) = a.require_matrix(what)?;
    if r != c {
        return Err(Error::shape(format!("{what}: expected square, got {r}x{c}")));
    }
    Ok(r)
}

/// Lower-triangular `L` with `L·Lᵀ = sigma` and strictly positive diagonal.
pub fn cholesky_lower(sigma: &Tensor) -> Result<Tensor> {
    let n = require_square(sigma, "cholesky")?;
    let scale = sigma.max_abs().max(1.0);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((sigma.at(i, j) - sigma.at(j, i)).abs());
        }
    }
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }

    let a = sigma.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Tensor::matrix(n, n, l)
}

fn check_solve(l: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let n = require_square(l, "triangular solve")?;
    let (r, c) = b.require_matrix("triangular solve rhs")?;
    if r != n {
        return Err(Error::shape(format!(
            "triangular solve: {n}x{n} factor with {r}-row right-hand side"
        )));
    }
    for i in 0..n {
        if l.at(i, i) == 0.0 {
            return Err(Error::Singular { index: i });
        }
    }
    Ok((n, c))
}

/// Solve `L·x = b` by forward substitution (each column of `b` independently).
/// Only the lower triangle of `l` is read.
pub fn tri_solve_lower(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c) = check_solve(l, b)?;
    let ld = l.data();
    let mut x = b.data().to_vec();
    for i in 0..n {
        let inv = ld[i * n + i];
        for col in 0..c {
            let mut s = x[i * c + col];
            for k in 0..i {
                s -= ld[i * n + k] * x[k * c + col];
            }
            x[i * c + col] = s / inv;
        }
    }
    Tensor::matrix(n, c, x)
}

/// Solve `Lᵀ·x = b` by back substitution, reading only the lower triangle of `l`.
pub fn tri_solve_lower_transposed(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c) = check_solve(l, b)?;
    let ld = l.data();
    let mut x = b.data().to_vec();
    for i in (0..n).rev() {
        let inv = ld[i * n + i];
        for col in 0..c {
            let mut s = x[i * c + col];
            for k in i + 1..n {
                s -= ld[k * n + i] * x[k * c + col];
            }
            x[i * c + col] = s / inv;
        }
    }
    Tensor::matrix(n, c, x)
}

/// Determinant via Gaussian elimination with partial pivoting.
pub fn determinant(a: &Tensor) -> Result<f64> {
    let n = require_square(a, "determinant")?;
    let mut m = a.data().to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
            .unwrap();
        if m[pivot * n + col] == 0.0 {
            return Ok(0.0);
        }
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
            }
            det = -det;
        }
        let p = m[col * n + col];
        det *= p;
        for r in col + 1..n {
            let f = m[r * n + col] / p;
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
        }
    }
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, matmul_nt};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_frob(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let a = Tensor::matrix(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut s = matmul_nt(&a, &a).unwrap();
        for i in 0..n {
            let v = s.at(i, i) + 0.1;
            s.set(i, i, v);
        }
        s
    }

    #[test]
    fn identity_factor() {
        assert_eq!(cholesky_lower(&Tensor::eye(3)).unwrap(), Tensor::eye(3));
    }

    #[test]
    fn closed_form_two_by_two() {
        let s = Tensor::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky_lower(&s).unwrap();
        let want = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap();
        assert!(l.max_abs_diff(&want) < 1e-15);
        assert!(rel_frob(&matmul_nt(&l, &l).unwrap(), &s) < 1e-15);
    }

    #[test]
    fn diagonal_factor() {
        let s = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]).unwrap();
        let l = cholesky_lower(&s).unwrap();
        assert!((l.at(0, 0) - 2f64.sqrt()).abs() < 1e-15);
        assert!((l.at(1, 1) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(l.at(1, 0), 0.0);
    }

    #[test]
    fn indefinite_reports_pivot() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        match cholesky_lower(&s) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let s = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_lower(&s), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn solve_identity_and_hand_case() {
        let b = Tensor::from_rows(&[vec![3.0, -1.0], vec![2.0, 7.0]]).unwrap();
        assert_eq!(tri_solve_lower(&Tensor::eye(2), &b).unwrap(), b);

        let l = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0], vec![1.0]]).unwrap();
        let x = tri_solve_lower(&l, &b).unwrap();
        assert_eq!(x.data(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_diagonal_is_singular() {
        let l = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let b = Tensor::zeros(&[2, 1]);
        assert!(matches!(tri_solve_lower(&l, &b), Err(Error::Singular { index: 1 })));
    }

    #[test]
    fn transposed_solve_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = cholesky_lower(&random_spd(&mut rng, 5)).unwrap();
        let b = Tensor::matrix(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x = tri_solve_lower_transposed(&l, &b).unwrap();
        let r = matmul(&l.transpose(), &x).unwrap().sub(&b).unwrap();
        assert!(r.frobenius_norm() < 1e-10);
    }

    #[test]
    fn determinant_small_cases() {
        let a = Tensor::from_rows(&[vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert!((determinant(&a).unwrap() + 6.0).abs() < 1e-14);
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(determinant(&s).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cholesky_reconstructs_spd(seed in any::<u64>(), n in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_spd(&mut rng, n);
            let l = cholesky_lower(&s).unwrap();
            for i in 0..n {
                prop_assert!(l.at(i, i) > 0.0);
                for j in i + 1..n {
                    prop_assert_eq!(l.at(i, j), 0.0);
                }
            }
            prop_assert!(rel_frob(&matmul_nt(&l, &l).unwrap(), &s) < 1e-9);
        }

        #[test]
        fn forward_substitution_residual(seed in any::<u64>(), n in 1usize..=8, c in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Unit-ish diagonal with small off-diagonal entries keeps cond(L) well below 1e4.
            let mut l = Tensor::zeros(&[n, n]);
            for i in 0..n {
                l.set(i, i, rng.random_range(1.0..2.0));
                for j in 0..i {
                    l.set(i, j, rng.random_range(-0.3..0.3));
                }
            }
            let b = Tensor::matrix(n, c, (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let x = tri_solve_lower(&l, &b).unwrap();
            let r = matmul(&l, &x).unwrap().sub(&b).unwrap();
            prop_assert!(r.frobenius_norm() < 1e-10);
        }
    }
}
