//! Least-squares and recursive least-squares channel estimation.

use crate::error::{Error, Result};
use crate::numerics::{c64, CMatrix};

/// Gram matrices with a 1-norm condition estimate above this are rejected.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

/// `Y Xᴴ (X Xᴴ)⁻¹`, solved through a Cholesky factorization of the Gram matrix.
pub fn ls_estimate(y: &CMatrix, x: &CMatrix) -> Result<CMatrix> {
    if y.cols() != x.cols() {
        return Err(Error::DimensionMismatch(format!(
            "received block has {} columns, pilots have {}",
            y.cols(),
            x.cols()
        )));
    }
    let gram = x.matmul(&x.adjoint());
    let condition = gram.condition_one();
    if !(condition <= MAX_GRAM_CONDITION) {
        return Err(Error::SingularGram { condition });
    }
    let rhs = x.matmul(&y.adjoint());
    let solved = gram
        .cholesky_solve(&rhs)
        .map_err(|_| Error::SingularGram { condition })?;
    Ok(solved.adjoint())
}

/// Iterate of the RLS recursion. `w` estimates `H_eqᴴ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    pub w: CMatrix,
    pub p: CMatrix,
    pub beta: f64,
    pub delta: f64,
    pub step: usize,
}

impl RlsState {
    /// `W = 0`, `P = δ⁻¹ I` for an `inputs x outputs` weight matrix.
    pub fn new(inputs: usize, outputs: usize, beta: f64, delta: f64) -> Self {
        RlsState {
            w: CMatrix::zeros(inputs, outputs),
            p: CMatrix::identity(inputs).scale_real(1.0 / delta),
            beta,
            delta,
            step: 0,
        }
    }

    pub fn estimate(&self) -> CMatrix {
        self.w.adjoint()
    }
}

/// One RLS update with pilot column `x` and received column `y`; returns the a-priori residual.
pub fn rls_step(state: &mut RlsState, x: &CMatrix, y: &CMatrix) -> CMatrix {
    let g = state.p.matmul(x);
    let denom = g.adjoint().matmul(x).as_scalar() + c64(state.beta, 0.0);
    let v = g.scale(denom.inv());
    let p = &state.p - &v.matmul(&g.adjoint());
    state.p = p.scale_real(1.0 / state.beta);
    let e = y - &state.w.adjoint().matmul(x);
    state.w = &state.w + &v.matmul(&e.adjoint());
    state.step += 1;
    e
}

/// Runs the recursion over all pilot columns and returns `Ĥ = Wᴴ`.
pub fn rls_estimate(x: &CMatrix, y: &CMatrix, beta: f64, delta: f64) -> Result<CMatrix> {
    Ok(rls_trace(x, y, beta, delta)?.0)
}

/// Like [`rls_estimate`], also returning the residual norm at every step.
pub fn rls_trace(x: &CMatrix, y: &CMatrix, beta: f64, delta: f64) -> Result<(CMatrix, Vec<f64>)> {
    if x.cols() != y.cols() {
        return Err(Error::DimensionMismatch(format!(
            "pilots have {} columns, received block has {}",
            x.cols(),
            y.cols()
        )));
    }
    let mut state = RlsState::new(x.rows(), y.rows(), beta, delta);
    let mut residuals = Vec::with_capacity(x.cols());
    for n in 0..x.cols() {
        let e = rls_step(&mut state, &x.col(n), &y.col(n));
        residuals.push(e.frob_norm());
    }
    Ok((state.estimate(), residuals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::random_pilots;
    use crate::numerics::Rng;

    /// Normal-equation oracle through the explicit Gauss-Jordan inverse.
    fn ls_oracle(y: &CMatrix, x: &CMatrix) -> CMatrix {
        y.matmul(&x.adjoint()).matmul(&x.matmul(&x.adjoint()).inverse().unwrap())
    }

    #[test]
    fn ls_noiseless_recovers_channel() {
        let mut rng = Rng::new(1);
        let h = rng.complex_normal_matrix(2, 4, 1.0);
        let x = random_pilots(4, 8, 1.0, &mut rng);
        let est = ls_estimate(&h.matmul(&x), &x).unwrap();
        assert!(est.max_abs_diff(&h) < 1e-12);
        let zero = ls_estimate(&CMatrix::zeros(2, 8), &x).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn ls_matches_normal_equation_oracle() {
        let mut rng = Rng::new(2);
        let h = rng.complex_normal_matrix(2, 4, 1.0);
        let x = random_pilots(4, 8, 1.0, &mut rng);
        let y = &h.matmul(&x) + &rng.complex_normal_matrix(2, 8, 0.01);
        let est = ls_estimate(&y, &x).unwrap();
        assert!(est.max_abs_diff(&ls_oracle(&y, &x)) < 1e-10);
    }

    #[test]
    fn ls_rejects_rank_deficient_pilots() {
        let x = CMatrix::filled(4, 8, c64(0.5, 0.0));
        let y = CMatrix::zeros(2, 8);
        assert!(matches!(ls_estimate(&y, &x), Err(Error::SingularGram { .. })));
    }

    #[test]
    fn zero_regressor_only_rescales_p() {
        let mut st = RlsState::new(3, 2, 0.9, 0.5);
        st.w = CMatrix::filled(3, 2, c64(1.0, -1.0));
        let w0 = st.w.clone();
        let p0 = st.p.clone();
        rls_step(&mut st, &CMatrix::zeros(3, 1), &CMatrix::filled(2, 1, c64(4.0, 0.0)));
        assert_eq!(st.w, w0);
        assert!(st.p.max_abs_diff(&p0.scale_real(1.0 / 0.9)) < 1e-15);
    }

    #[test]
    fn vanishing_gain_keeps_w() {
        let mut st = RlsState::new(2, 1, 0.99, 1e12);
        let x = CMatrix::column(&[c64(1.0, 0.0), c64(0.0, 1.0)]);
        rls_step(&mut st, &x, &CMatrix::scalar(c64(3.0, 0.0)));
        assert!(st.w.max_abs() < 1e-11);
    }

    #[test]
    fn scalar_two_step_recursion_converges() {
        let h = c64(0.7, -1.3);
        let x = CMatrix::from_real(1, 2, &[1.0, 1.0]);
        let y = CMatrix::from_vec(1, 2, vec![h, h]);
        let mut st = RlsState::new(1, 1, 1.0, 1e-6);
        for n in 0..2 {
            rls_step(&mut st, &x.col(n), &y.col(n));
        }
        assert!((st.w.as_scalar() - h.conj()).norm() < 1e-4);
    }

    #[test]
    fn rls_handles_empty_and_is_deterministic() {
        let e = rls_estimate(&CMatrix::zeros(4, 0), &CMatrix::zeros(2, 0), 0.99, 0.01).unwrap();
        assert_eq!(e, CMatrix::zeros(2, 4));
        let mut rng = Rng::new(3);
        let x = random_pilots(4, 16, 1.0, &mut rng);
        let y = rng.complex_normal_matrix(2, 16, 1.0);
        assert_eq!(
            rls_estimate(&x, &y, 0.99, 0.01).unwrap(),
            rls_estimate(&x, &y, 0.99, 0.01).unwrap()
        );
    }

    #[test]
    fn rls_close_to_ls_noiseless() {
        let mut rng = Rng::new(4);
        let h = rng.complex_normal_matrix(2, 4, 1.0);
        let x = random_pilots(4, 16, 1.0, &mut rng);
        let y = h.matmul(&x);
        let rls = rls_estimate(&x, &y, 0.999, 1e-6).unwrap();
        assert!((&rls - &h).frob_norm() / h.frob_norm() < 1e-3);
    }
}
