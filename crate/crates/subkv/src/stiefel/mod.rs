//! Learned orthonormal projection bases: activation statistics, the MLP
//! basis predictor, QR orthonormalization, and the per-layer training loop
//! that minimizes relative decoder-layer output error directly.

mod predictor;
mod train;

pub use predictor::{PredictorParams, DEFAULT_HIDDEN_FACTOR};
pub use train::{
    key_step_loss, key_warm_start, train_key_basis, train_value_bases, value_step_loss,
    value_warm_starts, Schedule, TrainConfig, QR_JITTER,
};

use crate::decoder::{
    capture_calibration, forward_compressed, ActivationRecord, DecoderConfig, DecoderLayerParams,
    DecoderStack,
};
use crate::error::{Error, Result};
use crate::linalg::{derive_seed, qr_decompose, relative_error, Matrix, RngState};
use crate::store::{BasisStore, LayerBases, Method};
use crate::surface::ErrorSurface;

/// Per-dimension mean and population variance of pooled activations, plus
/// their concatenation as the predictor feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub mu: Vec<f64>,
    pub sigma_sq: Vec<f64>,
}

impl ActivationStats {
    /// `[mu; sigma_sq]` as a 1 x 2d row.
    pub fn feature_row(&self) -> Matrix {
        let mut data = self.mu.clone();
        data.extend_from_slice(&self.sigma_sq);
        Matrix::row_vector(&data)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mean and population variance per dimension over all rows of all samples.
pub fn compute_stats(samples: &[&Matrix]) -> Result<ActivationStats> {
    let d = samples
        .first()
        .ok_or_else(|| Error::degenerate("compute_stats", "no samples"))?
        .cols();
    let total_rows: usize = samples.iter().map(|m| m.rows()).sum();
    if total_rows == 0 {
        return Err(Error::degenerate("compute_stats", "no rows"));
    }
    let mut mu = vec![0.0; d];
    for m in samples {
        if m.cols() != d {
            return Err(Error::dimension("compute_stats", "sample widths differ"));
        }
        for i in 0..m.rows() {
            for (j, v) in m.row(i).iter().enumerate() {
                mu[j] += v;
            }
        }
    }
    for v in &mut mu {
        *v /= total_rows as f64;
    }
    let mut sigma_sq = vec![0.0; d];
    for m in samples {
        for i in 0..m.rows() {
            for (j, v) in m.row(i).iter().enumerate() {
                let c = v - mu[j];
                sigma_sq[j] += c * c;
            }
        }
    }
    for v in &mut sigma_sq {
        *v /= total_rows as f64;
    }
    Ok(ActivationStats { mu, sigma_sq })
}

/// Q factor of the square input under the crate's sign convention; R is
/// discarded because the projector only depends on the column span.
pub fn orthonormalize(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::dimension(
            "orthonormalize",
            format!("expected square input, got {:?}", a.shape()),
        ));
    }
    Ok(qr_decompose(a)?.0)
}

/// Mean over calibration sequences of the relative decoder-layer output
/// error with reconstructed keys and values.
pub fn layer_output_delta(
    cfg: &DecoderConfig,
    layer: &DecoderLayerParams,
    records: &[ActivationRecord],
    key_basis: &Matrix,
    value_bases: &[Matrix],
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::degenerate("layer_output_delta", "no records"));
    }
    let mut sum = 0.0;
    for rec in records {
        let compressed = forward_compressed(cfg, layer, &rec.layer_input, key_basis, value_bases)?;
        sum += relative_error(&rec.layer_output, &compressed)?;
    }
    Ok(sum / records.len() as f64)
}

const KEY_TARGET_TAG: u64 = 0;
const VALUE_TARGET_TAG: u64 = 1;

/// Basis training and error-surface construction over a whole stack: record
/// each layer's calibration inputs, train key bases per candidate key rank
/// and value bases per candidate value rank, then evaluate the layer-output
/// error over every rank pair.
pub fn run_algorithm_1(
    stack: &DecoderStack,
    calib_inputs: &[Matrix],
    ranks_k: &[usize],
    ranks_v: &[usize],
    cfg: &TrainConfig,
) -> Result<(BasisStore, Vec<ErrorSurface>)> {
    cfg.validate()?;
    if ranks_k.is_empty() || ranks_v.is_empty() {
        return Err(Error::Config("candidate rank sets must be non-empty".into()));
    }
    let d_h = stack.config.d_h;
    if ranks_k.iter().chain(ranks_v).any(|&r| r == 0 || r > d_h) {
        return Err(Error::Config(format!(
            "candidate ranks must lie in [1, {d_h}]"
        )));
    }
    let records = capture_calibration(stack, calib_inputs)?;
    let mut layers = Vec::with_capacity(stack.layers.len());
    let mut surfaces = Vec::with_capacity(stack.layers.len());
    for (l, layer) in stack.layers.iter().enumerate() {
        let ctx = format!("layer {l}");
        let layer_records = &records[l];
        let mut key = Vec::with_capacity(ranks_k.len());
        let mut key_logs = Vec::with_capacity(ranks_k.len());
        for &r_k in ranks_k {
            let mut rng = RngState::new(derive_seed(
                cfg.seed,
                &[l as u64, KEY_TARGET_TAG, r_k as u64],
            ));
            let (basis, log) =
                train_key_basis(&stack.config, layer, layer_records, r_k, cfg, &mut rng)
                    .map_err(|e| e.with_context(&ctx))?;
            key.push(basis);
            key_logs.push(log);
        }
        let mut value = Vec::with_capacity(ranks_v.len());
        let mut value_logs = Vec::with_capacity(ranks_v.len());
        for &r_v in ranks_v {
            let mut rng = RngState::new(derive_seed(
                cfg.seed,
                &[l as u64, VALUE_TARGET_TAG, r_v as u64],
            ));
            let (bases, log) =
                train_value_bases(&stack.config, layer, layer_records, r_v, cfg, &mut rng)
                    .map_err(|e| e.with_context(&ctx))?;
            value.push(bases);
            value_logs.push(log);
        }
        let mut delta = vec![vec![0.0; ranks_v.len()]; ranks_k.len()];
        for (i, _) in ranks_k.iter().enumerate() {
            for (j, _) in ranks_v.iter().enumerate() {
                delta[i][j] =
                    layer_output_delta(&stack.config, layer, layer_records, &key[i], &value[j])
                        .map_err(|e| e.with_context(&ctx))?;
            }
        }
        surfaces.push(ErrorSurface::new(
            l,
            ranks_k.to_vec(),
            ranks_v.to_vec(),
            delta,
        )?);
        layers.push(LayerBases {
            key,
            value,
            key_logs,
            value_logs,
        });
    }
    Ok((
        BasisStore {
            method: Method::Stief,
            d_h,
            n_heads_kv: stack.config.n_heads_kv,
            ranks_k: ranks_k.to_vec(),
            ranks_v: ranks_v.to_vec(),
            layers,
        },
        surfaces,
    ))
}

#[cfg(test)]
mod tests;
