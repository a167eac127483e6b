//! Schur-complement marginalization and the dense quadratic prior it
//! produces.
//!
//! The prior is kept in square-root form so its cost is a plain sum of
//! squares: `‖r_p‖² = ‖H^{1/2}(x ⊟ lin) + H^{-1/2} b‖²`, with the
//! factorization taken from a clamped symmetric eigendecomposition.

use nalgebra::{DMatrix, DVector};

use crate::imu::{ImuState, STATE_DIM};

/// Relative eigenvalue cutoff below which directions are treated as
/// unconstrained.
const EIG_REL_CUTOFF: f64 = 1e-12;

/// Eliminate the first `marg_dims` dimensions of a quadratic `(h, b)` by
/// Schur complement, using an eigenvalue-thresholded pseudo-inverse for the
/// marginalized block.
pub fn schur_marginalize(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    marg_dims: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = h.nrows();
    let k = n - marg_dims;
    let h_mm = h.view((0, 0), (marg_dims, marg_dims)).into_owned();
    let h_mk = h.view((0, marg_dims), (marg_dims, k)).into_owned();
    let h_km = h.view((marg_dims, 0), (k, marg_dims)).into_owned();
    let h_kk = h.view((marg_dims, marg_dims), (k, k)).into_owned();
    let b_m = b.rows(0, marg_dims).into_owned();
    let b_k = b.rows(marg_dims, k).into_owned();

    let h_mm_sym = 0.5 * (&h_mm + h_mm.transpose());
    let eig = h_mm_sym.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = max_eig.max(1.0) * EIG_REL_CUTOFF;
    let mut inv_diag = DVector::zeros(marg_dims);
    for i in 0..marg_dims {
        inv_diag[i] = if eig.eigenvalues[i] > cutoff {
            1.0 / eig.eigenvalues[i]
        } else {
            0.0
        };
    }
    let h_mm_inv =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_diag) * eig.eigenvectors.transpose();

    let gain = h_km * &h_mm_inv;
    let h_out = &h_kk - &gain * h_mk;
    let b_out = b_k - gain * b_m;
    (0.5 * (&h_out + h_out.transpose()), b_out)
}

/// Dense quadratic prior over a subset of window states, produced by
/// marginalization and evaluated at a frozen linearization point.
#[derive(Debug, Clone)]
pub struct MarginalPrior {
    /// Information matrix, eigenvalue-clamped to PSD.
    pub h: DMatrix<f64>,
    /// Gradient offset at the linearization point.
    pub b: DVector<f64>,
    /// Linearization states, one per touched slot.
    pub lin: Vec<ImuState>,
    /// Window slots this prior touches, ascending.
    pub index_map: Vec<usize>,
    /// `S^{1/2} Uᵀ` of the clamped eigendecomposition.
    sqrt_info: DMatrix<f64>,
    /// `S^{-1/2} Uᵀ b` (pseudo-inverse on clamped directions).
    r0: DVector<f64>,
    /// Smallest eigenvalue before clamping, kept for diagnostics.
    pub min_eig_raw: f64,
}

impl MarginalPrior {
    pub fn new(
        h: DMatrix<f64>,
        b: DVector<f64>,
        lin: Vec<ImuState>,
        index_map: Vec<usize>,
    ) -> Self {
        assert_eq!(h.nrows(), STATE_DIM * index_map.len());
        assert_eq!(lin.len(), index_map.len());
        let h_sym = 0.5 * (&h + h.transpose());
        let eig = h_sym.clone().symmetric_eigen();
        let min_eig_raw = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let cutoff = max_eig.max(1.0) * EIG_REL_CUTOFF;

        let n = h_sym.nrows();
        let mut sqrt_diag = DVector::zeros(n);
        let mut inv_sqrt_diag = DVector::zeros(n);
        for i in 0..n {
            let lam = eig.eigenvalues[i];
            if lam > cutoff {
                sqrt_diag[i] = lam.sqrt();
                inv_sqrt_diag[i] = 1.0 / lam.sqrt();
            }
        }
        let ut = eig.eigenvectors.transpose();
        let sqrt_info = DMatrix::from_diagonal(&sqrt_diag) * &ut;
        let r0 = DMatrix::from_diagonal(&inv_sqrt_diag) * (&ut * &b);
        let h_clamped = sqrt_info.transpose() * &sqrt_info;

        MarginalPrior {
            h: h_clamped,
            b,
            lin,
            index_map,
            sqrt_info,
            r0,
            min_eig_raw,
        }
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// Stacked tangent difference of the touched window states from the
    /// linearization point.
    pub fn state_diff(&self, states: &[ImuState]) -> DVector<f64> {
        let mut dx = DVector::zeros(self.dim());
        for (k, &slot) in self.index_map.iter().enumerate() {
            let d = states[slot].local_diff(&self.lin[k]);
            dx.rows_mut(STATE_DIM * k, STATE_DIM).copy_from(&d);
        }
        dx
    }

    /// Prior residual `H^{1/2} dx + H^{-1/2} b` at the given states.
    pub fn residual(&self, states: &[ImuState]) -> DVector<f64> {
        &self.sqrt_info * self.state_diff(states) + &self.r0
    }

    pub fn sqrt_info(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }

    pub fn cost(&self, states: &[ImuState]) -> f64 {
        self.residual(states).norm_squared()
    }

    /// Rewrite the touched slots after the window dropped its oldest state.
    pub fn shifted_down(mut self) -> Self {
        for slot in &mut self.index_map {
            debug_assert!(*slot >= 1);
            *slot -= 1;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> DMatrix<f64> {
        let j = DMatrix::from_fn(rank, n, |_, _| rng.gen_range(-1.0..1.0));
        j.transpose() * j
    }

    #[test]
    fn schur_matches_block_elimination_on_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let m = 5;
        let h = random_psd(&mut rng, n, 2 * n);
        let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let (h_out, b_out) = schur_marginalize(&h, &b, m);

        // direct formula with a dense inverse
        let h_mm = h.view((0, 0), (m, m)).into_owned();
        let inv = h_mm.try_inverse().unwrap();
        let gain = h.view((m, 0), (n - m, m)).into_owned() * inv;
        let h_ref = h.view((m, m), (n - m, n - m)).into_owned()
            - &gain * h.view((0, m), (m, n - m)).into_owned();
        let b_ref = b.rows(m, n - m).into_owned() - gain * b.rows(0, m).into_owned();
        assert_relative_eq!(h_out, h_ref, epsilon = 1e-9);
        assert_relative_eq!(b_out, b_ref, epsilon = 1e-9);
    }

    #[test]
    fn marginalized_solution_matches_batch() {
        // minimizing over the marginalized block first must leave the same
        // optimum for the kept block
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = 10;
            let m = 4;
            let h = random_psd(&mut rng, n, 3 * n) + DMatrix::identity(n, n) * 1e-3;
            let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            // batch optimum of 0.5 xᵀHx + bᵀx
            let x_batch = -h.clone().cholesky().unwrap().solve(&b);
            let (h_k, b_k) = schur_marginalize(&h, &b, m);
            let x_kept = -h_k.clone().cholesky().unwrap().solve(&b_k);
            assert_relative_eq!(x_kept, x_batch.rows(m, n - m).into_owned(), epsilon = 1e-9);
        }
    }

    #[test]
    fn prior_square_root_reproduces_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n_states = 3;
        let n = STATE_DIM * n_states;
        let h = random_psd(&mut rng, n, 2 * n);
        // a consistent gradient: b = H x* for some x*
        let xstar = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let b = &h * xstar;
        let lin: Vec<ImuState> = (0..n_states).map(|_| ImuState::at_rest()).collect();
        let prior = MarginalPrior::new(h.clone(), b.clone(), lin.clone(), vec![0, 1, 2]);
        assert_relative_eq!(
            prior.sqrt_info().transpose() * prior.sqrt_info(),
            h,
            epsilon = 1e-8
        );
        // at the linearization point the residual is H^{-1/2} b
        let r = prior.residual(&lin);
        // gradient there must equal b (projected onto range(H), which
        // contains b by construction)
        let grad = prior.sqrt_info().transpose() * r;
        assert_relative_eq!(grad, b, epsilon = 1e-8);
    }

    #[test]
    fn prior_clamps_negative_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = STATE_DIM;
        let mut h = random_psd(&mut rng, n, 2 * n);
        // inject a slightly negative direction, as roundoff would
        h[(0, 0)] -= 1e-10 + h.row(0).iter().skip(1).map(|v| v.abs()).sum::<f64>() * 0.0;
        let h_sym = 0.5 * (&h + h.transpose());
        let prior = MarginalPrior::new(
            h_sym,
            DVector::zeros(n),
            vec![ImuState::at_rest()],
            vec![0],
        );
        let eig = prior.h.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
    }
}
