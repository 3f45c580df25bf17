//! Complex matrices, seeded randomness and the two nonlinear maps used to
//! approximate a matrix inverse inside unfolded layers.

mod matrix;
mod rng;

pub use matrix::{c64, CMatrix, C64};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Default threshold below which a diagonal entry is considered degenerate.
pub const EPS_DIAG: f64 = 1e-12;

/// `A⁺`: reciprocals of the diagonal, zeros elsewhere.
pub fn diag_inv_plus(a: &CMatrix, eps_diag: f64) -> Result<CMatrix> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "diag_inv_plus needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut out = CMatrix::zeros(n, n);
    for i in 0..n {
        let d = a[(i, i)];
        let modulus = d.norm();
        if modulus <= eps_diag {
            return Err(Error::DegenerateDiagonal {
                index: i,
                modulus,
                eps: eps_diag,
            });
        }
        out[(i, i)] = d.inv();
    }
    Ok(out)
}

/// `D⁻`: drops the imaginary part of each diagonal entry.
pub fn zero_diag_imag(d: &CMatrix) -> CMatrix {
    assert!(d.is_square(), "zero_diag_imag needs a square matrix");
    let mut out = d.clone();
    for i in 0..d.rows() {
        out[(i, i)].im = 0.0;
    }
    out
}

/// `A⁺ B + D⁻`, the trainable stand-in for `A⁻¹`.
pub fn approx_inverse(a: &CMatrix, b: &CMatrix, d: &CMatrix) -> Result<CMatrix> {
    if a.shape() != b.shape() || a.shape() != d.shape() {
        return Err(Error::DimensionMismatch(format!(
            "approx_inverse operands {:?}, {:?}, {:?}",
            a.shape(),
            b.shape(),
            d.shape()
        )));
    }
    let plus = diag_inv_plus(a, EPS_DIAG)?;
    Ok(&plus.matmul(b) + &zero_diag_imag(d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense3() -> CMatrix {
        CMatrix::from_fn(3, 3, |i, j| c64(1.0 + i as f64 + 2.0 * j as f64, i as f64 - j as f64))
    }

    #[test]
    fn diag_inv_plus_dense_example() {
        let a = dense3();
        let p = diag_inv_plus(&a, EPS_DIAG).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert!((p[(i, i)] - a[(i, i)].inv()).norm() < 1e-15);
                } else {
                    assert_eq!(p[(i, j)], c64(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn diag_inv_plus_identity_and_hand_case() {
        assert_eq!(diag_inv_plus(&CMatrix::identity(4), EPS_DIAG).unwrap(), CMatrix::identity(4));
        let a = CMatrix::diag(&[c64(2.0, 0.0), c64(0.0, 4.0)]);
        let p = diag_inv_plus(&a, EPS_DIAG).unwrap();
        assert!((p[(0, 0)] - c64(0.5, 0.0)).norm() < 1e-16);
        assert!((p[(1, 1)] - c64(0.0, -0.25)).norm() < 1e-16);
    }

    #[test]
    fn diag_inv_plus_rejects_small_diagonal() {
        let a = CMatrix::diag(&[c64(1.0, 0.0), c64(1e-13, 0.0)]);
        assert!(matches!(
            diag_inv_plus(&a, EPS_DIAG),
            Err(Error::DegenerateDiagonal { index: 1, .. })
        ));
        // configurable threshold
        assert!(diag_inv_plus(&a, 1e-14).is_ok());
    }

    #[test]
    fn zero_diag_imag_examples() {
        let d = dense3();
        let z = zero_diag_imag(&d);
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert_eq!(z[(i, i)], c64(d[(i, i)].re, 0.0));
                } else {
                    assert_eq!(z[(i, j)], d[(i, j)]);
                }
            }
        }
        let real = CMatrix::from_real(2, 2, &[1.0, -2.0, 3.5, 4.0]);
        assert_eq!(zero_diag_imag(&real), real);
        let h = CMatrix::diag(&[c64(1.0, 2.0), c64(3.0, -1.0)]);
        assert_eq!(zero_diag_imag(&h), CMatrix::diag(&[c64(1.0, 0.0), c64(3.0, 0.0)]));
    }

    #[test]
    fn approx_inverse_exact_for_diagonal() {
        let a = CMatrix::diag(&[c64(2.0, 1.0), c64(-3.0, 0.0), c64(0.5, 0.5)]);
        let z = CMatrix::zeros(3, 3);
        let r = approx_inverse(&a, &CMatrix::identity(3), &z).unwrap();
        assert!(a.matmul(&r).max_abs_diff(&CMatrix::identity(3)) < 1e-10);
        assert!(r.max_abs_diff(&a.inverse().unwrap()) < 1e-14);
        let i = approx_inverse(&CMatrix::identity(3), &CMatrix::identity(3), &z).unwrap();
        assert_eq!(i, CMatrix::identity(3));
    }

    #[test]
    fn approx_inverse_shape_mismatch() {
        let a = CMatrix::identity(2);
        assert!(approx_inverse(&a, &CMatrix::identity(3), &a).is_err());
    }
}
