use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Central-difference step used throughout the test oracles.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

const SINGULAR_PIVOT: f64 = 1e-14;

/// Central-difference Jacobian of `f` at `x`.
pub fn finite_diff_jacobian<F>(f: F, x: &DVector<f64>, eps: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xp = x.clone();
    for j in 0..n {
        xp[j] = x[j] + eps;
        let fp = f(&xp);
        xp[j] = x[j] - eps;
        let fm = f(&xp);
        xp[j] = x[j];
        cols.push((fp - fm) / (2.0 * eps));
    }
    let rows = cols.first().map_or(0, |c| c.len());
    DMatrix::from_fn(rows, n, |i, j| cols[j][i])
}

/// `log|det M|` from a partially pivoted LU factorization.
pub fn dense_logabsdet(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
            context: "logabsdet of non-square matrix",
        });
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows() {
        let p = u[(i, i)].abs();
        if !(p >= SINGULAR_PIVOT) {
            return Err(Error::SingularMatrix { pivot: p });
        }
        acc += p.ln();
    }
    Ok(acc)
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    m.clone().svd(false, false).singular_values
}

/// Exact 2-norm via SVD.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().fold(0.0_f64, |a, &b| a.max(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_matrix(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        let mut g = rng::seeded(seed);
        let v = rng::standard_normal(&mut g, r * c);
        DMatrix::from_column_slice(r, c, v.as_slice())
    }

    #[test]
    fn logabsdet_of_identity_is_zero() {
        assert_eq!(dense_logabsdet(&DMatrix::identity(12, 12)).unwrap(), 0.0);
    }

    #[test]
    fn logabsdet_of_reciprocal_diagonal_is_zero() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        assert!(dense_logabsdet(&m).unwrap().abs() < 1e-15);
    }

    #[test]
    fn logabsdet_matches_singular_values() {
        let m = random_matrix(11, 10, 10);
        let oracle: f64 = singular_values(&m).iter().map(|s| s.ln()).sum();
        assert!((dense_logabsdet(&m).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn logabsdet_rejects_singular() {
        let mut m = random_matrix(2, 4, 4);
        let r0 = m.row(0).clone_owned();
        m.set_row(3, &r0);
        assert!(matches!(
            dense_logabsdet(&m),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn fd_jacobian_of_identity() {
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let j = finite_diff_jacobian(|v| v.clone(), &x, 1e-5);
        assert!((j - DMatrix::identity(3, 3)).abs().max() < 1e-10);
    }

    #[test]
    fn fd_jacobian_of_affine_map() {
        let a = random_matrix(5, 4, 3);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let x = DVector::from_vec(vec![0.1, 0.2, -0.7]);
        let j = finite_diff_jacobian(|v| &a * v + &b, &x, 1e-5);
        assert!((j - a).abs().max() < 1e-9);
    }
}
