//! SVD-style proxy-objective basis constructions used as comparison points
//! and as initializers for the learned bases.
//!
//! All three share the compression scheme of the rest of the crate (cache
//! `X P`, reconstruct `X P P^T`); they differ in the proxy objective that
//! picks `P`.

use crate::decoder::{ActivationRecord, DecoderConfig};
use crate::error::{Error, Result};
use crate::linalg::{
    qr_decompose, solve_upper_triangular, svd, symmetric_eigen, truncate_columns, Matrix,
};
use crate::store::{BasisStore, LayerBases, Method, TrainingLog};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    KSvd,
    Eigen,
    KqSvd,
}

impl BaselineKind {
    pub fn method(self) -> Method {
        match self {
            BaselineKind::KSvd => Method::KSvd,
            BaselineKind::Eigen => Method::Eigen,
            BaselineKind::KqSvd => Method::KqSvd,
        }
    }
}

/// Full square right-singular-vector basis from an accumulated Gram matrix.
///
/// Routing through the Gram eigendecomposition (rather than a data-matrix
/// SVD) makes the degenerate EigenAttention reductions exact: stacking a
/// zero block adds an all-zero Gram, and duplicating the data doubles the
/// Gram entrywise, both of which reproduce the identical rotation sequence.
pub(crate) fn right_singular_basis(gram: &Matrix) -> Result<Matrix> {
    let (_, vectors) = symmetric_eigen(gram)?;
    Ok(vectors)
}

fn check_rank(op: &'static str, d_h: usize, r: usize) -> Result<()> {
    if r == 0 || r > d_h {
        return Err(Error::dimension(
            op,
            format!("rank {r} outside [1, {d_h}]"),
        ));
    }
    Ok(())
}

/// Reconstruction-optimal key basis: top-r right singular vectors of `k`
/// (the Eckart-Young optimum of the key reconstruction objective).
pub fn ksvd_basis(k: &Matrix, r: usize) -> Result<Matrix> {
    check_rank("ksvd_basis", k.cols(), r)?;
    if k.frobenius_norm() == 0.0 {
        return Err(Error::degenerate("ksvd_basis", "all-zero input"));
    }
    truncate_columns(&right_singular_basis(&k.gram())?, r)
}

/// Shared key/query basis: top-r right singular vectors of the vertically
/// stacked `[K; Q]`, computed through the accumulated Gram `K^T K + Q^T Q`.
pub fn eigen_basis(k: &Matrix, q: &Matrix, r: usize) -> Result<Matrix> {
    if k.cols() != q.cols() {
        return Err(Error::dimension(
            "eigen_basis",
            format!("k has {} columns, q has {}", k.cols(), q.cols()),
        ));
    }
    check_rank("eigen_basis", k.cols(), r)?;
    if k.frobenius_norm() == 0.0 && q.frobenius_norm() == 0.0 {
        return Err(Error::degenerate("eigen_basis", "all-zero stacked input"));
    }
    let gram = k.gram().add(&q.gram())?;
    truncate_columns(&right_singular_basis(&gram)?, r)
}

/// EigenAttention's value pathway uses the plain reconstruction objective.
pub fn eigen_value_basis(v: &Matrix, r: usize) -> Result<Matrix> {
    ksvd_basis(v, r)
}

/// Score-matrix factors: the best rank-r approximation of `S = Q K^T`
/// realized as `(Q p_q)(K p_k)^T`, fitted by least squares on the
/// calibration data. The factors are NOT orthonormal.
///
/// With thin QRs `Q = Q_q R_q`, `K = Q_k R_k`, the score matrix is
/// `Q_q (R_q R_k^T) Q_k^T`, so the truncated SVD of the small core
/// `R_q R_k^T = U S V^T` gives `p_q = R_q^{-1} U_r S_r^{1/2}` and
/// `p_k = R_k^{-1} V_r S_r^{1/2}` without ever forming the n x n scores.
pub fn kqsvd_factors(q: &Matrix, k: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let d_h = q.cols();
    if k.cols() != d_h || k.rows() != q.rows() {
        return Err(Error::dimension(
            "kqsvd_factors",
            format!("{:?} vs {:?}", q.shape(), k.shape()),
        ));
    }
    if q.rows() < d_h {
        return Err(Error::dimension(
            "kqsvd_factors",
            format!("needs at least {d_h} rows, got {}", q.rows()),
        ));
    }
    check_rank("kqsvd_factors", d_h, r)?;
    let (_, r_q) = qr_decompose(q)?;
    let (_, r_k) = qr_decompose(k)?;
    let core = r_q.matmul(&r_k.transpose())?;
    let (u, sigma, v) = svd(&core)?;
    let scaled = |basis: &Matrix| -> Result<Matrix> {
        let mut t = truncate_columns(basis, r)?;
        for j in 0..r {
            let s = sigma[j].max(0.0).sqrt();
            for i in 0..d_h {
                t.set(i, j, t.get(i, j) * s);
            }
        }
        Ok(t)
    };
    let p_q = solve_upper_triangular(&r_q, &scaled(&u)?)?;
    let p_k = solve_upper_triangular(&r_k, &scaled(&v)?)?;
    Ok((p_q, p_k))
}

/// Value basis preserving the `V W_O` contribution: least-squares pullback
/// of the top-r left singular directions of `V W_O`, orthonormalized by QR.
pub fn kqsvd_value_basis(v: &Matrix, w_o_head: &Matrix, r: usize) -> Result<Matrix> {
    let d_h = v.cols();
    if w_o_head.rows() != d_h {
        return Err(Error::dimension(
            "kqsvd_value_basis",
            format!("w_o_head is {:?}, expected {d_h} rows", w_o_head.shape()),
        ));
    }
    if v.rows() < d_h {
        return Err(Error::dimension(
            "kqsvd_value_basis",
            format!("needs at least {d_h} rows, got {}", v.rows()),
        ));
    }
    check_rank("kqsvd_value_basis", d_h, r)?;
    let (_, r_v) = qr_decompose(v)?;
    let core = r_v.matmul(w_o_head)?;
    let (u, sigma, _) = svd(&core)?;
    let mut target = truncate_columns(&u, r)?;
    for j in 0..r {
        let s = sigma[j].max(0.0).sqrt();
        for i in 0..d_h {
            target.set(i, j, target.get(i, j) * s);
        }
    }
    let p_raw = solve_upper_triangular(&r_v, &target)?;
    let (p, _) = qr_decompose(&p_raw)?;
    Ok(p)
}

/// Pooled per-layer data consistent with head sharing: keys pooled across
/// KV heads and sequences for the shared key basis, queries across query
/// heads, values per KV head.
pub(crate) struct PooledLayerData {
    pub keys: Matrix,
    pub queries: Matrix,
    /// For the score-factor fit: keys duplicated so that row i of `queries`
    /// pairs with the serving KV head's keys.
    pub keys_per_query_head: Matrix,
    pub values: Vec<Matrix>,
}

pub(crate) fn pool_layer_data(
    cfg: &DecoderConfig,
    records: &[ActivationRecord],
) -> Result<PooledLayerData> {
    let mut key_blocks = Vec::new();
    let mut query_blocks = Vec::new();
    let mut paired_key_blocks = Vec::new();
    let mut value_blocks: Vec<Vec<&Matrix>> = vec![Vec::new(); cfg.n_heads_kv];
    for rec in records {
        for g in 0..cfg.n_heads_kv {
            key_blocks.push(&rec.keys[g]);
            value_blocks[g].push(&rec.values[g]);
        }
        for h in 0..cfg.n_heads_q {
            query_blocks.push(&rec.queries[h]);
            paired_key_blocks.push(&rec.keys[cfg.kv_head_of(h)]);
        }
    }
    Ok(PooledLayerData {
        keys: Matrix::concat_rows(&key_blocks)?,
        queries: Matrix::concat_rows(&query_blocks)?,
        keys_per_query_head: Matrix::concat_rows(&paired_key_blocks)?,
        values: value_blocks
            .into_iter()
            .map(|blocks| Matrix::concat_rows(&blocks))
            .collect::<Result<_>>()?,
    })
}

/// W_O row blocks of every query head in KV group `g`, stacked side by side:
/// the full output pathway a compressed value head must preserve.
fn group_output_block(cfg: &DecoderConfig, w_o: &Matrix, g: usize) -> Result<Matrix> {
    let d_h = cfg.d_h;
    let group = cfg.group_size();
    let mut blocks = Vec::with_capacity(group);
    for h in g * group..(g + 1) * group {
        let mut block = Matrix::zeros(d_h, cfg.d_model);
        for i in 0..d_h {
            for j in 0..cfg.d_model {
                block.set(i, j, w_o.get(h * d_h + i, j));
            }
        }
        blocks.push(block);
    }
    let refs: Vec<&Matrix> = blocks.iter().collect();
    Matrix::concat_cols(&refs)
}

/// Closed-form bases for every layer and candidate rank, in the same store
/// layout the trained bases use (iso-protocol comparison).
pub fn build_store(
    kind: BaselineKind,
    cfg: &DecoderConfig,
    w_o_per_layer: &[&Matrix],
    records: &[Vec<ActivationRecord>],
    ranks_k: &[usize],
    ranks_v: &[usize],
) -> Result<BasisStore> {
    let mut layers = Vec::with_capacity(records.len());
    for (l, layer_records) in records.iter().enumerate() {
        let pooled = pool_layer_data(cfg, layer_records)?;
        let mut key = Vec::with_capacity(ranks_k.len());
        for &r in ranks_k {
            let basis = match kind {
                BaselineKind::KSvd => ksvd_basis(&pooled.keys, r)?,
                BaselineKind::Eigen => eigen_basis(&pooled.keys, &pooled.queries, r)?,
                BaselineKind::KqSvd => {
                    let (_, p_k) = kqsvd_factors(&pooled.queries, &pooled.keys_per_query_head, r)?;
                    // The stored basis must be orthonormal for the projector
                    // scheme; QR keeps the span of the fitted factor.
                    qr_decompose(&p_k)?.0
                }
            };
            key.push(basis);
        }
        let mut value = Vec::with_capacity(ranks_v.len());
        for &r in ranks_v {
            let mut heads = Vec::with_capacity(cfg.n_heads_kv);
            for g in 0..cfg.n_heads_kv {
                let basis = match kind {
                    BaselineKind::KSvd => ksvd_basis(&pooled.values[g], r)?,
                    BaselineKind::Eigen => eigen_value_basis(&pooled.values[g], r)?,
                    BaselineKind::KqSvd => {
                        let w_o_block = group_output_block(cfg, w_o_per_layer[l], g)?;
                        kqsvd_value_basis(&pooled.values[g], &w_o_block, r)?
                    }
                };
                heads.push(basis);
            }
            value.push(heads);
        }
        layers.push(LayerBases {
            key,
            value,
            key_logs: vec![TrainingLog::default(); ranks_k.len()],
            value_logs: vec![TrainingLog::default(); ranks_v.len()],
        });
    }
    Ok(BasisStore {
        method: kind.method(),
        d_h: cfg.d_h,
        n_heads_kv: cfg.n_heads_kv,
        ranks_k: ranks_k.to_vec(),
        ranks_v: ranks_v.to_vec(),
        layers,
    })
}

#[cfg(test)]
mod tests;
