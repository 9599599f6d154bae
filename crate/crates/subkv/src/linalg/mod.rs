//! Deterministic dense linear algebra: matrix arithmetic, norms, Householder
//! QR, one-sided Jacobi SVD, and seeded random generation.
//!
//! Everything is 64-bit and purely sequential with fixed summation order, so
//! identical inputs and seeds give bit-identical results.

mod decomp;
mod matrix;
mod rng;

pub use decomp::{
    qr_decompose, random_orthonormal, solve_upper_triangular, svd, symmetric_eigen,
    JACOBI_MAX_SWEEPS, JACOBI_TOL, QR_RANK_TOL,
};
pub(crate) use decomp::{column_sign_pattern, row_mask, unit_column};
pub use matrix::{relative_error, truncate_columns, Matrix};
pub use rng::{derive_seed, random_gaussian, RngState};

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn seeded_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = RngState::new(seed);
        random_gaussian(rows, cols, &mut rng)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn qr_invariants(seed in 0u64..1_000_000, m in 2usize..10, extra in 0usize..4) {
            let n = (m - 1).min(m - extra.min(m - 1)).max(1);
            let a = seeded_matrix(seed, m, n);
            let (q, r) = qr_decompose(&a).unwrap();
            let recon = q.matmul(&r).unwrap();
            prop_assert!(relative_error(&a, &recon).unwrap() < 1e-10);
            let qtq = q.transpose().matmul(&q).unwrap();
            prop_assert!(qtq.sub(&Matrix::identity(n)).unwrap().frobenius_norm() < 1e-10);
            for i in 0..n {
                prop_assert!(r.get(i, i) >= 0.0);
            }
        }

        #[test]
        fn svd_eckart_young(seed in 0u64..1_000_000, m in 3usize..9, n in 2usize..6, r in 1usize..4) {
            let n = n.min(m);
            let r = r.min(n);
            let a = seeded_matrix(seed, m, n);
            let (u, sigma, v) = svd(&a).unwrap();
            let u_r = u.slice_cols(0, r).unwrap();
            let v_r = v.slice_cols(0, r).unwrap();
            let mut us = u_r.clone();
            for j in 0..r {
                for i in 0..m {
                    us.set(i, j, us.get(i, j) * sigma[j]);
                }
            }
            let approx = us.matmul(&v_r.transpose()).unwrap();
            let err_sq = a.sub(&approx).unwrap().frobenius_norm().powi(2);
            let tail: f64 = sigma[r..].iter().map(|s| s * s).sum();
            let scale = sigma[0] * sigma[0];
            prop_assert!((err_sq - tail).abs() <= 1e-8 * scale.max(1e-30));
        }

        #[test]
        fn square_orthonormal_projector_is_identity(seed in 0u64..1_000_000, d in 2usize..8) {
            let mut rng = RngState::new(seed);
            let p = random_orthonormal(d, d, &mut rng);
            let a = random_gaussian(d + 3, d, &mut rng);
            let projected = a.matmul(&p).unwrap().matmul(&p.transpose()).unwrap();
            prop_assert!(relative_error(&a, &projected).unwrap() < 1e-12);
        }

        #[test]
        fn truncated_q_stays_orthonormal(seed in 0u64..1_000_000, r in 1usize..8) {
            let a = seeded_matrix(seed, 8, 8);
            if let Ok((q, _)) = qr_decompose(&a) {
                let p = truncate_columns(&q, r).unwrap();
                let ptp = p.transpose().matmul(&p).unwrap();
                prop_assert!(ptp.sub(&Matrix::identity(r)).unwrap().frobenius_norm() < 1e-10);
            }
        }
    }
}
