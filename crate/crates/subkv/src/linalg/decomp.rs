use super::{Matrix, RngState};
use crate::error::{Error, Result};

/// Relative pivot threshold below which QR reports rank deficiency.
pub const QR_RANK_TOL: f64 = 1e-10;
/// Off-diagonal tolerance (relative) for both Jacobi iterations.
pub const JACOBI_TOL: f64 = 1e-12;
/// Sweep cap for both Jacobi iterations.
pub const JACOBI_MAX_SWEEPS: usize = 100;

fn sign_nonzero(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Householder QR with a nonnegative-diagonal sign convention on R.
///
/// Returns the thin factors: `q` is rows x cols with orthonormal columns,
/// `r` is cols x cols upper-triangular with `r[i][i] >= 0`, and `a = q * r`.
///
/// Each reflection is applied at full matrix size through masked reflection
/// vectors, in exactly the operation order the differentiable replay in the
/// autodiff module uses, so the two paths produce bit-identical factors.
pub fn qr_decompose(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::dimension(
            "qr_decompose",
            format!("{m}x{n} has more columns than rows"),
        ));
    }
    let threshold = QR_RANK_TOL * a.frobenius_norm();
    let mut w = a.clone();
    let mut q = Matrix::identity(m);
    for k in 0..n {
        let col = w.slice_cols(k, 1)?;
        let x = col.hadamard(&row_mask(m, k))?;
        let nrm = x.transpose().matmul(&x)?.scalar_value()?.sqrt();
        if nrm <= threshold {
            return Err(Error::RankDeficient {
                op: "qr_decompose",
                index: k,
                pivot: nrm,
                threshold,
            });
        }
        let x0 = x.get(k, 0);
        let alpha = nrm * (-sign_nonzero(x0));
        let v = x.sub(&unit_column(m, k).scale(alpha))?;
        let vtv = v.transpose().matmul(&v)?.scalar_value()?;
        let beta = (1.0 / vtv) * 2.0;
        let vt_w = v.transpose().matmul(&w)?;
        w = w.sub(&v.matmul(&vt_w)?.scale(beta))?;
        let qv = q.matmul(&v)?;
        q = q.sub(&qv.matmul(&v.transpose())?.scale(beta))?;
    }
    // Flip signs so every diagonal entry of R is nonnegative.
    let signs: Vec<f64> = (0..n).map(|k| sign_nonzero(w.get(k, k))).collect();
    q = q.hadamard(&column_sign_pattern(m, m, &signs))?;
    let q_thin = q.slice_cols(0, n)?;
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            r.set(i, j, w.get(i, j) * signs[i]);
        }
    }
    Ok((q_thin, r))
}

/// Column vector with ones at rows >= `from` and zeros above.
pub(crate) fn row_mask(m: usize, from: usize) -> Matrix {
    let mut mask = Matrix::zeros(m, 1);
    for i in from..m {
        mask.set(i, 0, 1.0);
    }
    mask
}

pub(crate) fn unit_column(m: usize, k: usize) -> Matrix {
    let mut e = Matrix::zeros(m, 1);
    e.set(k, 0, 1.0);
    e
}

/// Matrix whose column j is the constant `signs[j]` (or 1 past the end);
/// used to flip whole columns by Hadamard product.
pub(crate) fn column_sign_pattern(rows: usize, cols: usize, signs: &[f64]) -> Matrix {
    let mut p = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            p.set(i, j, signs.get(j).copied().unwrap_or(1.0));
        }
    }
    p
}

fn col_dots(w: &Matrix, p: usize, q: usize) -> (f64, f64, f64) {
    let (m, n) = w.shape();
    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
    let data = w.data();
    for i in 0..m {
        let wp = data[i * n + p];
        let wq = data[i * n + q];
        alpha += wp * wp;
        beta += wq * wq;
        gamma += wp * wq;
    }
    (alpha, beta, gamma)
}

fn rotate_cols(w: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let (m, n) = w.shape();
    let data = w.data_mut();
    for i in 0..m {
        let wp = data[i * n + p];
        let wq = data[i * n + q];
        data[i * n + p] = c * wp - s * wq;
        data[i * n + q] = s * wp + c * wq;
    }
}

fn jacobi_params(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let tau = (aqq - app) / (2.0 * apq);
    let t = sign_nonzero(tau) / (tau.abs() + (1.0 + tau * tau).sqrt());
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, c * t)
}

/// One-sided Jacobi SVD: `a = u * diag(sigma) * v^T` with `sigma` sorted
/// descending and orthonormal columns in `u` and `v`.
///
/// Shapes are economy-size: for an m x p input, `u` is m x k, `sigma` has
/// k = min(m, p) entries and `v` is p x k. Inputs with more columns than
/// rows are handled by transposing.
pub fn svd(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    if m < n {
        let (u, sigma, v) = svd(&a.transpose())?;
        return Ok((v, sigma, u));
    }
    if n == 0 {
        return Err(Error::dimension("svd", "empty matrix"));
    }
    let mut w = a.clone();
    let mut v = Matrix::identity(n);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta, gamma) = col_dots(&w, p, q);
                if gamma == 0.0 || gamma * gamma <= JACOBI_TOL * JACOBI_TOL * alpha * beta {
                    continue;
                }
                rotated = true;
                let (c, s) = jacobi_params(alpha, beta, gamma);
                rotate_cols(&mut w, p, q, c, s);
                rotate_cols(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric(
            "svd",
            format!("one-sided Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"),
        ));
    }
    // Column norms are the singular values; sort descending (stable).
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| {
            let mut s = 0.0;
            for i in 0..m {
                let x = w.get(i, j);
                s += x * x;
            }
            s.sqrt()
        })
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let mut sigma = Vec::with_capacity(n);
    let mut u = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        sigma.push(norms[src]);
        for i in 0..n {
            v_sorted.set(i, dst, v.get(i, src));
        }
        if norms[src] > 0.0 {
            for i in 0..m {
                u.set(i, dst, w.get(i, src) / norms[src]);
            }
        }
    }
    complete_zero_columns(&mut u, &sigma);
    fix_pair_signs(&mut u, &mut v_sorted);
    Ok((u, sigma, v_sorted))
}

/// Replace columns whose singular value vanished with a deterministic
/// orthonormal completion against the existing columns.
fn complete_zero_columns(u: &mut Matrix, sigma: &[f64]) {
    let (m, n) = u.shape();
    for j in 0..n {
        if sigma[j] > 0.0 {
            continue;
        }
        'candidates: for cand in 0..m {
            let mut r: Vec<f64> = (0..m).map(|i| if i == cand { 1.0 } else { 0.0 }).collect();
            // Two rounds of Gram-Schmidt against already-filled columns.
            for _ in 0..2 {
                for k in 0..n {
                    if k == j && sigma[j] == 0.0 {
                        continue;
                    }
                    if k != j && sigma[k] == 0.0 && k > j {
                        continue; // not yet filled
                    }
                    let mut dot = 0.0;
                    for i in 0..m {
                        dot += u.get(i, k) * r[i];
                    }
                    for i in 0..m {
                        r[i] -= dot * u.get(i, k);
                    }
                }
            }
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for i in 0..m {
                    u.set(i, j, r[i] / norm);
                }
                break 'candidates;
            }
        }
    }
}

/// Deterministic sign convention: the largest-magnitude entry of each right
/// singular vector is made positive, flipping the matching left vector too.
fn fix_pair_signs(u: &mut Matrix, v: &mut Matrix) {
    let (m, k) = u.shape();
    let n = v.rows();
    for j in 0..k {
        let mut best = 0usize;
        let mut best_abs = 0.0;
        for i in 0..n {
            let a = v.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if v.get(best, j) < 0.0 {
            for i in 0..n {
                v.set(i, j, -v.get(i, j));
            }
            for i in 0..m {
                u.set(i, j, -u.get(i, j));
            }
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues sorted descending with eigenvectors as matching
/// columns. Intended for Gram matrices; the stopping rule and rotation
/// parameters are written so that scaling the input by a power of two
/// reproduces the identical rotation sequence.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    if m != n {
        return Err(Error::dimension("symmetric_eigen", format!("{m}x{n}")));
    }
    let stop = JACOBI_TOL * 1e-2 * a.frobenius_norm();
    let mut g = a.clone();
    let mut v = Matrix::identity(n);
    if stop == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = g.get(p, q);
                if apq.abs() <= stop {
                    continue;
                }
                rotated = true;
                let (c, s) = jacobi_params(g.get(p, p), g.get(q, q), apq);
                apply_two_sided_rotation(&mut g, p, q, c, s);
                rotate_cols(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric(
            "symmetric_eigen",
            format!("Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| g.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let mut values = Vec::with_capacity(n);
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(diag[src]);
        for i in 0..n {
            vectors.set(i, dst, v.get(i, src));
        }
    }
    fix_vector_signs(&mut vectors);
    Ok((values, vectors))
}

fn apply_two_sided_rotation(g: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = g.rows();
    let app = g.get(p, p);
    let aqq = g.get(q, q);
    let apq = g.get(p, q);
    for i in 0..n {
        if i == p || i == q {
            continue;
        }
        let gip = g.get(i, p);
        let giq = g.get(i, q);
        let new_p = c * gip - s * giq;
        let new_q = s * gip + c * giq;
        g.set(i, p, new_p);
        g.set(p, i, new_p);
        g.set(i, q, new_q);
        g.set(q, i, new_q);
    }
    g.set(p, p, c * c * app - 2.0 * c * s * apq + s * s * aqq);
    g.set(q, q, s * s * app + 2.0 * c * s * apq + c * c * aqq);
    g.set(p, q, 0.0);
    g.set(q, p, 0.0);
}

fn fix_vector_signs(v: &mut Matrix) {
    let n = v.rows();
    for j in 0..v.cols() {
        let mut best = 0usize;
        let mut best_abs = 0.0;
        for i in 0..n {
            let a = v.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if v.get(best, j) < 0.0 {
            for i in 0..n {
                v.set(i, j, -v.get(i, j));
            }
        }
    }
}

/// Back substitution for `r * x = b` with upper-triangular `r`.
pub fn solve_upper_triangular(r: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = r.rows();
    if r.cols() != n || b.rows() != n {
        return Err(Error::dimension(
            "solve_upper_triangular",
            format!("{}x{} with rhs {}x{}", r.rows(), r.cols(), b.rows(), b.cols()),
        ));
    }
    let mut x = Matrix::zeros(n, b.cols());
    for col in 0..b.cols() {
        for i in (0..n).rev() {
            let mut acc = b.get(i, col);
            for j in i + 1..n {
                acc -= r.get(i, j) * x.get(j, col);
            }
            let pivot = r.get(i, i);
            if pivot == 0.0 {
                return Err(Error::RankDeficient {
                    op: "solve_upper_triangular",
                    index: i,
                    pivot: 0.0,
                    threshold: 0.0,
                });
            }
            x.set(i, col, acc / pivot);
        }
    }
    Ok(x)
}

/// d x r matrix with orthonormal columns, uniform over the Stiefel manifold:
/// QR of a Gaussian draw under the nonnegative-diagonal sign convention.
pub fn random_orthonormal(d: usize, r: usize, rng: &mut RngState) -> Matrix {
    assert!(r <= d, "random_orthonormal requires r <= d");
    loop {
        let g = super::random_gaussian(d, r, rng);
        if let Ok((q, _)) = qr_decompose(&g) {
            return q;
        }
        // A singular Gaussian draw has probability zero; redraw if it happens.
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_gaussian, relative_error};

    fn orthonormality_residual(q: &Matrix) -> f64 {
        let qtq = q.transpose().matmul(q).unwrap();
        qtq.sub(&Matrix::identity(q.cols())).unwrap().frobenius_norm()
    }

    #[test]
    fn qr_identity() {
        let (q, r) = qr_decompose(&Matrix::identity(3)).unwrap();
        assert_eq!(q, Matrix::identity(3));
        assert_eq!(r, Matrix::identity(3));
    }

    #[test]
    fn qr_permutation() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (q, r) = qr_decompose(&a).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((q.get(i, j) - a.get(i, j)).abs() < 1e-15);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((r.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn qr_residuals_random() {
        let mut rng = RngState::new(1);
        let a = random_gaussian(8, 8, &mut rng);
        let (q, r) = qr_decompose(&a).unwrap();
        let recon = q.matmul(&r).unwrap();
        assert!(relative_error(&a, &recon).unwrap() < 1e-10);
        assert!(orthonormality_residual(&q) < 1e-10);
        for i in 0..8 {
            assert!(r.get(i, i) >= 0.0);
            for j in 0..i {
                assert_eq!(r.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn qr_thin_shape() {
        let mut rng = RngState::new(5);
        let a = random_gaussian(9, 4, &mut rng);
        let (q, r) = qr_decompose(&a).unwrap();
        assert_eq!(q.shape(), (9, 4));
        assert_eq!(r.shape(), (4, 4));
        assert!(relative_error(&a, &q.matmul(&r).unwrap()).unwrap() < 1e-10);
        assert!(orthonormality_residual(&q) < 1e-10);
    }

    #[test]
    fn qr_rank_deficient_detected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(matches!(
            qr_decompose(&a),
            Err(Error::RankDeficient { .. })
        ));
        assert!(matches!(
            qr_decompose(&Matrix::zeros(3, 2)),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn qr_wide_rejected() {
        assert!(qr_decompose(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn svd_diagonal() {
        let a = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (_, sigma, _) = svd(&a).unwrap();
        assert!((sigma[0] - 3.0).abs() < 1e-12);
        assert!((sigma[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_rank_one() {
        let u = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![-1.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![2.0], vec![1.0]]).unwrap();
        let a = u.matmul(&v.transpose()).unwrap();
        let (uu, sigma, vv) = svd(&a).unwrap();
        let expected = u.frobenius_norm() * v.frobenius_norm();
        assert!((sigma[0] - expected).abs() < 1e-12 * expected);
        assert!(sigma[1].abs() < 1e-12 * expected);
        assert!(orthonormality_residual(&uu) < 1e-9);
        assert!(orthonormality_residual(&vv) < 1e-9);
    }

    #[test]
    fn svd_reconstructs_and_matches_gram_oracle() {
        let mut rng = RngState::new(9);
        let a = random_gaussian(6, 4, &mut rng);
        let (u, sigma, v) = svd(&a).unwrap();
        // Reconstruction.
        let mut us = u.clone();
        for j in 0..4 {
            for i in 0..6 {
                us.set(i, j, us.get(i, j) * sigma[j]);
            }
        }
        let recon = us.matmul(&v.transpose()).unwrap();
        assert!(relative_error(&a, &recon).unwrap() < 1e-9);
        assert!(orthonormality_residual(&u) < 1e-9);
        assert!(orthonormality_residual(&v) < 1e-9);
        // Independent oracle: eigenvalues of A^T A by naive cyclic Jacobi,
        // coded separately from the production eigensolver.
        let gram = a.gram();
        let eigs = test_jacobi_eigenvalues(&gram);
        for (i, &lambda) in eigs.iter().enumerate() {
            let s = lambda.max(0.0).sqrt();
            assert!(
                (sigma[i] - s).abs() <= 1e-8 * s.max(1.0),
                "sigma[{i}] = {} vs oracle {s}",
                sigma[i]
            );
        }
    }

    #[test]
    fn svd_wide_input() {
        let mut rng = RngState::new(12);
        let a = random_gaussian(3, 7, &mut rng);
        let (u, sigma, v) = svd(&a).unwrap();
        assert_eq!(u.shape(), (3, 3));
        assert_eq!(sigma.len(), 3);
        assert_eq!(v.shape(), (7, 3));
        let mut us = u.clone();
        for j in 0..3 {
            for i in 0..3 {
                us.set(i, j, us.get(i, j) * sigma[j]);
            }
        }
        assert!(relative_error(&a, &us.matmul(&v.transpose()).unwrap()).unwrap() < 1e-9);
    }

    /// Test-only eigenvalue oracle: unsorted cyclic Jacobi on a copy, diagonal
    /// read off and sorted. Deliberately independent of `symmetric_eigen`.
    fn test_jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
        let n = a.rows();
        let mut g = a.clone();
        for _ in 0..200 {
            let mut off = 0.0;
            for p in 0..n {
                for q in 0..n {
                    if p != q {
                        off += g.get(p, q).abs();
                    }
                }
            }
            if off < 1e-13 {
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let apq = g.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = 0.5 * (2.0 * apq).atan2(g.get(p, p) - g.get(q, q));
                    let (c, s) = (theta.cos(), theta.sin());
                    let mut g2 = g.clone();
                    for i in 0..n {
                        g2.set(i, p, c * g.get(i, p) + s * g.get(i, q));
                        g2.set(i, q, -s * g.get(i, p) + c * g.get(i, q));
                    }
                    let g3 = g2.clone();
                    for j in 0..n {
                        g2.set(p, j, c * g3.get(p, j) + s * g3.get(q, j));
                        g2.set(q, j, -s * g3.get(p, j) + c * g3.get(q, j));
                    }
                    g = g2;
                }
            }
        }
        let mut eigs: Vec<f64> = (0..n).map(|i| g.get(i, i)).collect();
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        eigs
    }

    #[test]
    fn symmetric_eigen_matches_svd_squares() {
        let mut rng = RngState::new(21);
        let a = random_gaussian(10, 5, &mut rng);
        let (values, vectors) = symmetric_eigen(&a.gram()).unwrap();
        let (_, sigma, _) = svd(&a).unwrap();
        for i in 0..5 {
            assert!((values[i] - sigma[i] * sigma[i]).abs() < 1e-8 * values[0].max(1.0));
        }
        assert!(orthonormality_residual(&vectors) < 1e-10);
        // Eigenvector property: G v = lambda v.
        let g = a.gram();
        for j in 0..5 {
            let vj = vectors.slice_cols(j, 1).unwrap();
            let gv = g.matmul(&vj).unwrap();
            let lv = vj.scale(values[j]);
            assert!(gv.sub(&lv).unwrap().frobenius_norm() < 1e-9 * values[0].max(1.0));
        }
    }

    #[test]
    fn eigen_doubling_is_bit_exact() {
        let mut rng = RngState::new(33);
        let a = random_gaussian(12, 6, &mut rng);
        let g = a.gram();
        let g2 = g.scale(2.0);
        let (v1, e1) = symmetric_eigen(&g).unwrap();
        let (v2, e2) = symmetric_eigen(&g2).unwrap();
        for i in 0..6 {
            assert_eq!((v1[i] * 2.0).to_bits(), v2[i].to_bits());
        }
        assert_eq!(e1.data(), e2.data());
    }

    #[test]
    fn solve_upper_triangular_roundtrip() {
        let r = Matrix::from_rows(&[
            vec![2.0, 1.0, -1.0],
            vec![0.0, 3.0, 0.5],
            vec![0.0, 0.0, 1.5],
        ])
        .unwrap();
        let x_true = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![2.0, -2.0]])
            .unwrap();
        let b = r.matmul(&x_true).unwrap();
        let x = solve_upper_triangular(&r, &b).unwrap();
        assert!(x.sub(&x_true).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn random_orthonormal_properties() {
        let mut rng = RngState::new(0);
        let q = random_orthonormal(4, 4, &mut rng);
        assert!(orthonormality_residual(&q) < 1e-10);

        let mut r1 = RngState::new(0);
        let mut r2 = RngState::new(0);
        let a = random_orthonormal(8, 3, &mut r1);
        let b = random_orthonormal(8, 3, &mut r2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn random_orthonormal_column_means_center() {
        // Monte-Carlo: entries of a Haar frame column have mean 0; the mean
        // of N draws of an entry has std 1/sqrt(d*N) approximately.
        let mut rng = RngState::new(1017);
        let d = 6;
        let draws = 10_000;
        let mut sums = vec![0.0; d];
        for _ in 0..draws {
            let q = random_orthonormal(d, 1, &mut rng);
            for i in 0..d {
                sums[i] += q.get(i, 0);
            }
        }
        let sd = (1.0 / (d as f64 * draws as f64)).sqrt();
        // 3-sigma check per entry, widened to 3.5 for the family of d
        // simultaneous tests (Bonferroni), plus an aggregate chi-square cap.
        let mut chi_sq = 0.0;
        for s in &sums {
            let z = (s / draws as f64) / sd;
            chi_sq += z * z;
            assert!(z.abs() < 3.5, "column mean z-score {z} too large");
        }
        assert!(chi_sq < 22.5, "aggregate chi-square {chi_sq} too large");
    }
}
