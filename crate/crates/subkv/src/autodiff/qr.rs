use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{column_sign_pattern, row_mask, unit_column, Matrix, QR_RANK_TOL};

fn sign_nonzero(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Q factor of the Householder QR of `a`, recorded as a differentiable
/// composition of tape primitives. The triangular factor carries no gradient
/// path: the projector depends only on the span of Q's columns, so R is
/// discarded.
///
/// The sequence of reflections replays the arithmetic of
/// [`crate::linalg::qr_decompose`] operation for operation, so the primal Q
/// here is bit-identical to the plain factorization, including the
/// nonnegative-diagonal sign convention. Signs of reflection pivots are read
/// from primal values; they are locally constant, so gradients are exact
/// wherever the factorization is smooth (numerically full-rank input).
pub fn qr_q(tape: &mut Tape, a: Var) -> Result<Var> {
    let (m, n) = tape.value(a).shape();
    if m < n {
        return Err(Error::dimension(
            "qr_q",
            format!("{m}x{n} has more columns than rows"),
        ));
    }
    let threshold = QR_RANK_TOL * tape.value(a).frobenius_norm();
    let mut w = a;
    let mut q = tape.constant(Matrix::identity(m));
    for k in 0..n {
        let col = tape.slice_cols(w, k, 1)?;
        let x = tape.hadamard_const(col, row_mask(m, k))?;
        let xt = tape.transpose(x);
        let nrm_sq = tape.matmul(xt, x)?;
        let nrm = tape.sqrt_scalar(nrm_sq)?;
        let nrm_val = tape.value(nrm).scalar_value()?;
        if nrm_val <= threshold {
            return Err(Error::RankDeficient {
                op: "qr_q",
                index: k,
                pivot: nrm_val,
                threshold,
            });
        }
        let x0 = tape.value(x).get(k, 0);
        let alpha = tape.scale(nrm, -sign_nonzero(x0));
        let e_k = tape.constant(unit_column(m, k));
        let alpha_ek = tape.scalar_mul(alpha, e_k)?;
        let v = tape.sub(x, alpha_ek)?;
        let vt = tape.transpose(v);
        let vtv = tape.matmul(vt, v)?;
        let recip = tape.recip_scalar(vtv)?;
        let beta = tape.scale(recip, 2.0);
        let vt_w = tape.matmul(vt, w)?;
        let v_vtw = tape.matmul(v, vt_w)?;
        let upd_w = tape.scalar_mul(beta, v_vtw)?;
        w = tape.sub(w, upd_w)?;
        let qv = tape.matmul(q, v)?;
        let qv_vt = tape.matmul(qv, vt)?;
        let upd_q = tape.scalar_mul(beta, qv_vt)?;
        q = tape.sub(q, upd_q)?;
    }
    let signs: Vec<f64> = (0..n)
        .map(|k| sign_nonzero(tape.value(w).get(k, k)))
        .collect();
    let q_signed = tape.hadamard_const(q, column_sign_pattern(m, m, &signs))?;
    tape.slice_cols(q_signed, 0, n)
}
