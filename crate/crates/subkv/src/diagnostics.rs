//! Layer-level output-preservation metrics: attention-output error,
//! decoder-layer output error, and mean token-wise cosine similarity, plus
//! the method-comparison report behind the diagnostics CSV and charts.

pub mod svg;

use crate::decoder::{
    capture_calibration, forward_compressed, forward_compressed_with_record, ActivationRecord,
    DecoderLayerParams, DecoderStack,
};
use crate::error::{Error, Result};
use crate::linalg::{relative_error, Matrix};
use crate::store::BasisStore;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub method: String,
    pub layer: usize,
    pub attn_rel_err: f64,
    pub layer_rel_err: f64,
    pub mean_cosine: f64,
}

/// Relative Frobenius error between the original attention output
/// (post-projection, pre-residual) and its compressed counterpart on the
/// same recorded input.
pub fn attention_output_error(
    cfg: &crate::decoder::DecoderConfig,
    layer: &DecoderLayerParams,
    record: &ActivationRecord,
    key_basis: &Matrix,
    value_bases: &[Matrix],
) -> Result<f64> {
    let (_, compressed) =
        forward_compressed_with_record(cfg, layer, &record.layer_input, key_basis, value_bases)?;
    relative_error(&record.attention_output, &compressed.attention_output)
}

/// Relative decoder-layer output error on a single recorded sequence.
pub fn layer_output_error(
    cfg: &crate::decoder::DecoderConfig,
    layer: &DecoderLayerParams,
    record: &ActivationRecord,
    key_basis: &Matrix,
    value_bases: &[Matrix],
) -> Result<f64> {
    let compressed =
        forward_compressed(cfg, layer, &record.layer_input, key_basis, value_bases)?;
    relative_error(&record.layer_output, &compressed)
}

/// Mean over token rows of the cosine between matching rows.
pub fn mean_token_cosine(y: &Matrix, y_tilde: &Matrix) -> Result<f64> {
    if y.shape() != y_tilde.shape() {
        return Err(Error::dimension(
            "mean_token_cosine",
            format!("{:?} vs {:?}", y.shape(), y_tilde.shape()),
        ));
    }
    let mut sum = 0.0;
    for i in 0..y.rows() {
        let a = y.row(i);
        let b = y_tilde.row(i);
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::degenerate(
                "mean_token_cosine",
                format!("zero-norm token row {i}"),
            ));
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        sum += dot / (na * nb);
    }
    Ok(sum / y.rows() as f64)
}

/// Per layer and per method: the three metrics averaged over an evaluation
/// batch, at one (r_K, r_V) rank pair.
pub fn compare_methods(
    stack: &DecoderStack,
    eval_inputs: &[Matrix],
    stores: &[&BasisStore],
    r_k: usize,
    r_v: usize,
) -> Result<Vec<LayerDiagnostics>> {
    if eval_inputs.is_empty() {
        return Err(Error::Diagnostics("no evaluation sequences".into()));
    }
    for store in stores {
        if !store.has_rank_pair(r_k, r_v) {
            return Err(Error::Diagnostics(format!(
                "store '{}' does not cover rank pair ({r_k}, {r_v}); \
                 trained keys {:?}, values {:?}",
                store.method, store.ranks_k, store.ranks_v
            )));
        }
    }
    let records = capture_calibration(stack, eval_inputs)?;
    let mut rows = Vec::with_capacity(stores.len() * stack.layers.len());
    for store in stores {
        for (l, layer) in stack.layers.iter().enumerate() {
            let key_basis = store.key_basis(l, r_k)?;
            let value_bases = store.value_bases(l, r_v)?;
            let mut attn = 0.0;
            let mut out_err = 0.0;
            let mut cosine = 0.0;
            for rec in &records[l] {
                let (compressed_out, compressed_rec) = forward_compressed_with_record(
                    &stack.config,
                    layer,
                    &rec.layer_input,
                    key_basis,
                    value_bases,
                )?;
                attn +=
                    relative_error(&rec.attention_output, &compressed_rec.attention_output)?;
                out_err += relative_error(&rec.layer_output, &compressed_out)?;
                cosine += mean_token_cosine(&rec.layer_output, &compressed_out)?;
            }
            let n = records[l].len() as f64;
            rows.push(LayerDiagnostics {
                method: store.method.to_string(),
                layer: l,
                attn_rel_err: attn / n,
                layer_rel_err: out_err / n,
                mean_cosine: cosine / n,
            });
        }
    }
    Ok(rows)
}

/// Documented CSV layout: method, layer, attn_rel_err, layer_rel_err,
/// mean_cosine.
pub fn diagnostics_csv(rows: &[LayerDiagnostics]) -> String {
    let mut out = String::from("method,layer,attn_rel_err,layer_rel_err,mean_cosine\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.layer, r.attn_rel_err, r.layer_rel_err, r.mean_cosine
        ));
    }
    out
}

/// One chart per metric: layer index on the x axis, one series per method.
pub fn metric_charts(rows: &[LayerDiagnostics]) -> Vec<(String, String)> {
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let metrics: [(&str, &str, fn(&LayerDiagnostics) -> f64); 3] = [
        ("attn_rel_err", "attention output relative error", |r| {
            r.attn_rel_err
        }),
        ("layer_rel_err", "decoder-layer output relative error", |r| {
            r.layer_rel_err
        }),
        ("mean_cosine", "mean token-wise cosine similarity", |r| {
            r.mean_cosine
        }),
    ];
    metrics
        .iter()
        .map(|(name, title, extract)| {
            let series: Vec<(String, Vec<(f64, f64)>)> = methods
                .iter()
                .map(|m| {
                    let points: Vec<(f64, f64)> = rows
                        .iter()
                        .filter(|r| &r.method == m)
                        .map(|r| (r.layer as f64, extract(r)))
                        .collect();
                    (m.clone(), points)
                })
                .collect();
            let chart = svg::line_chart(title, "layer", name, &series);
            (name.to_string(), chart)
        })
        .collect()
}
