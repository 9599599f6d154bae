//! A desk-scale GQA transformer decoder layer (and stack) with activation
//! capture and hooks to substitute reconstructed low-rank keys and values.
//!
//! Layers are pre-norm residual: `y = x + Attn(norm(x))` followed by
//! `out = y + MLP(norm(y))`, with a causal mask over the prefix tokens.

use crate::error::{Error, Result};
use crate::linalg::{random_gaussian, Matrix, RngState};
use serde::{Deserialize, Serialize};

/// Orthonormality tolerance for projection bases fed into a compressed
/// forward pass.
pub const BASIS_ORTHO_TOL: f64 = 1e-8;

const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    SiluGated,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_heads_q: usize,
    pub n_heads_kv: usize,
    pub d_h: usize,
    pub d_ff: usize,
    pub norm_kind: NormKind,
    pub mlp_kind: MlpKind,
    pub rope_enabled: bool,
    pub n_layers: usize,
}

impl Default for DecoderConfig {
    /// Toy architecture mirroring the Llama-family shape at a size where
    /// every experiment finishes in minutes.
    fn default() -> Self {
        DecoderConfig {
            d_model: 64,
            n_heads_q: 4,
            n_heads_kv: 2,
            d_h: 16,
            d_ff: 172,
            norm_kind: NormKind::RmsNorm,
            mlp_kind: MlpKind::SiluGated,
            rope_enabled: false,
            n_layers: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads_q * self.d_h {
            return Err(Error::Config(format!(
                "d_model {} must equal n_heads_q {} * d_h {}",
                self.d_model, self.n_heads_q, self.d_h
            )));
        }
        if self.n_heads_kv == 0 || self.n_heads_q % self.n_heads_kv != 0 {
            return Err(Error::Config(format!(
                "n_heads_q {} must be divisible by n_heads_kv {}",
                self.n_heads_q, self.n_heads_kv
            )));
        }
        if self.rope_enabled && self.d_h % 2 != 0 {
            return Err(Error::Config(
                "rotary embeddings require an even per-head width".into(),
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("n_layers and d_ff must be positive".into()));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_heads_q / self.n_heads_kv
    }

    /// KV head serving the given query head (consecutive grouping).
    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gain: Matrix,
    pub offset: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub enum MlpParams {
    SiluGated {
        w_gate: Matrix,
        w_up: Matrix,
        w_down: Matrix,
    },
    Gelu {
        w_in: Matrix,
        w_out: Matrix,
    },
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub mlp: MlpParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub config: DecoderConfig,
    pub layers: Vec<DecoderLayerParams>,
}

/// Everything the compression pipeline needs to see from one forward pass of
/// one layer on one sequence. Per-head keys and queries are post-rope when
/// rotary embeddings are enabled, matching what a compressed cache stores.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    pub layer_input: Matrix,
    pub queries: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub head_outputs: Vec<Matrix>,
    pub attention_output: Matrix,
    pub layer_output: Matrix,
}

/// Borrowed view of the bases used to reconstruct keys and values: one
/// shared key basis per layer, one value basis per KV head.
#[derive(Debug, Clone, Copy)]
pub struct Compression<'a> {
    pub key_basis: &'a Matrix,
    pub value_bases: &'a [Matrix],
}

fn gaussian_weight(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    random_gaussian(rows, cols, rng).scale(1.0 / (rows as f64).sqrt())
}

fn init_norm(cfg: &DecoderConfig) -> NormParams {
    NormParams {
        gain: Matrix::from_vec(1, cfg.d_model, vec![1.0; cfg.d_model]).unwrap(),
        offset: match cfg.norm_kind {
            NormKind::LayerNorm => Some(Matrix::zeros(1, cfg.d_model)),
            NormKind::RmsNorm => None,
        },
    }
}

/// Stack of layers with Gaussian 1/sqrt(fan_in) weights, deterministic per
/// seed.
pub fn init_stack(config: &DecoderConfig, rng: &mut RngState) -> Result<DecoderStack> {
    config.validate()?;
    let kv_width = config.n_heads_kv * config.d_h;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let w_q = gaussian_weight(config.d_model, config.d_model, rng);
        let w_k = gaussian_weight(config.d_model, kv_width, rng);
        let w_v = gaussian_weight(config.d_model, kv_width, rng);
        let w_o = gaussian_weight(config.d_model, config.d_model, rng);
        let mlp = match config.mlp_kind {
            MlpKind::SiluGated => MlpParams::SiluGated {
                w_gate: gaussian_weight(config.d_model, config.d_ff, rng),
                w_up: gaussian_weight(config.d_model, config.d_ff, rng),
                w_down: gaussian_weight(config.d_ff, config.d_model, rng),
            },
            MlpKind::Gelu => MlpParams::Gelu {
                w_in: gaussian_weight(config.d_model, config.d_ff, rng),
                w_out: gaussian_weight(config.d_ff, config.d_model, rng),
            },
        };
        layers.push(DecoderLayerParams {
            w_q,
            w_k,
            w_v,
            w_o,
            mlp,
            norm1: init_norm(config),
            norm2: init_norm(config),
        });
    }
    Ok(DecoderStack {
        config: config.clone(),
        layers,
    })
}

pub(crate) fn apply_norm(x: &Matrix, params: &NormParams, kind: NormKind) -> Matrix {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let row = x.row(i);
        match kind {
            NormKind::RmsNorm => {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let inv = 1.0 / (ms + crate::autodiff::RMS_NORM_EPS).sqrt();
                for j in 0..d {
                    out.set(i, j, params.gain.get(0, j) * row[j] * inv);
                }
            }
            NormKind::LayerNorm => {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + crate::autodiff::LAYER_NORM_EPS).sqrt();
                let offset = params.offset.as_ref();
                for j in 0..d {
                    let b = offset.map_or(0.0, |o| o.get(0, j));
                    out.set(i, j, params.gain.get(0, j) * (row[j] - mean) * inv + b);
                }
            }
        }
    }
    out
}

pub(crate) fn apply_mlp(h: &Matrix, mlp: &MlpParams) -> Result<Matrix> {
    match mlp {
        MlpParams::SiluGated {
            w_gate,
            w_up,
            w_down,
        } => {
            let gate = h.matmul(w_gate)?.map(crate::autodiff::silu_primal);
            let up = h.matmul(w_up)?;
            gate.hadamard(&up)?.matmul(w_down)
        }
        MlpParams::Gelu { w_in, w_out } => h
            .matmul(w_in)?
            .map(crate::autodiff::gelu_primal)
            .matmul(w_out),
    }
}

/// Causal row softmax over the scores of one head: row i attends to columns
/// 0..=i only.
pub(crate) fn causal_softmax(scores: &Matrix) -> Matrix {
    let n = scores.rows();
    debug_assert_eq!(scores.cols(), n);
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let row = scores.row(i);
        let visible = &row[..=i];
        let max = visible.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let out_row = out.row_mut(i);
        for (j, &v) in visible.iter().enumerate() {
            let e = (v - max).exp();
            out_row[j] = e;
            denom += e;
        }
        for v in out_row[..=i].iter_mut() {
            *v /= denom;
        }
    }
    out
}

fn check_basis(d_h: usize, basis: &Matrix, what: &str) -> Result<()> {
    let (rows, r) = basis.shape();
    if rows != d_h || r == 0 || r > d_h {
        return Err(Error::dimension(
            "forward_compressed",
            format!("{what} basis must be {d_h}xr with 1 <= r <= {d_h}, got {rows}x{r}"),
        ));
    }
    let gram = basis.transpose().matmul(basis)?;
    let residual = gram.sub(&Matrix::identity(r))?.frobenius_norm();
    if residual > BASIS_ORTHO_TOL {
        return Err(Error::contract(
            "forward_compressed",
            format!("{what} basis is not orthonormal: residual {residual:e}"),
        ));
    }
    Ok(())
}

fn validate_compression(cfg: &DecoderConfig, comp: &Compression<'_>) -> Result<()> {
    check_basis(cfg.d_h, comp.key_basis, "key")?;
    if comp.value_bases.len() != cfg.n_heads_kv {
        return Err(Error::dimension(
            "forward_compressed",
            format!(
                "expected {} value bases, got {}",
                cfg.n_heads_kv,
                comp.value_bases.len()
            ),
        ));
    }
    for (h, b) in comp.value_bases.iter().enumerate() {
        check_basis(cfg.d_h, b, &format!("value head {h}"))?;
    }
    Ok(())
}

/// Project onto the basis subspace: `m P P^T`.
fn reconstruct(m: &Matrix, basis: &Matrix) -> Result<Matrix> {
    m.matmul(basis)?.matmul(&basis.transpose())
}

/// One decoder layer forward pass, optionally with compressed K/V and
/// optionally capturing intermediate activations.
fn layer_forward(
    cfg: &DecoderConfig,
    layer: &DecoderLayerParams,
    x: &Matrix,
    compression: Option<&Compression<'_>>,
    capture: bool,
) -> Result<(Matrix, Option<ActivationRecord>)> {
    if x.cols() != cfg.d_model {
        return Err(Error::dimension(
            "forward",
            format!("input is {}x{}, d_model {}", x.rows(), x.cols(), cfg.d_model),
        ));
    }
    if let Some(comp) = compression {
        validate_compression(cfg, comp)?;
    }
    let n = x.rows();
    let d_h = cfg.d_h;
    let positions: Vec<usize> = (0..n).collect();

    let normed = apply_norm(x, &layer.norm1, cfg.norm_kind);
    let q_all = normed.matmul(&layer.w_q)?;
    let k_all = normed.matmul(&layer.w_k)?;
    let v_all = normed.matmul(&layer.w_v)?;

    let mut queries = Vec::with_capacity(cfg.n_heads_q);
    for h in 0..cfg.n_heads_q {
        queries.push(q_all.slice_cols(h * d_h, d_h)?);
    }
    let mut keys = Vec::with_capacity(cfg.n_heads_kv);
    let mut values = Vec::with_capacity(cfg.n_heads_kv);
    for g in 0..cfg.n_heads_kv {
        keys.push(k_all.slice_cols(g * d_h, d_h)?);
        values.push(v_all.slice_cols(g * d_h, d_h)?);
    }
    if cfg.rope_enabled {
        // Queries rotate per query head; keys rotate per KV head. The cache
        // (and therefore compression) acts on post-rope keys.
        for q in &mut queries {
            *q = rope_rotate(q, &positions)?;
        }
        for k in &mut keys {
            *k = rope_rotate(k, &positions)?;
        }
    }

    let scale = 1.0 / (d_h as f64).sqrt();
    let mut head_outputs: Vec<Matrix> = Vec::with_capacity(cfg.n_heads_q);
    for h in 0..cfg.n_heads_q {
        let g = cfg.kv_head_of(h);
        let k_eff = match compression {
            Some(comp) => reconstruct(&keys[g], comp.key_basis)?,
            None => keys[g].clone(),
        };
        let v_eff = match compression {
            Some(comp) => reconstruct(&values[g], &comp.value_bases[g])?,
            None => values[g].clone(),
        };
        let scores = queries[h].matmul(&k_eff.transpose())?.scale(scale);
        let probs = causal_softmax(&scores);
        head_outputs.push(probs.matmul(&v_eff)?);
    }
    let refs: Vec<&Matrix> = head_outputs.iter().collect();
    let concat = Matrix::concat_cols(&refs)?;
    let attn = concat.matmul(&layer.w_o)?;
    let y = x.add(&attn)?;
    let normed2 = apply_norm(&y, &layer.norm2, cfg.norm_kind);
    let mlp_out = apply_mlp(&normed2, &layer.mlp)?;
    let out = y.add(&mlp_out)?;
    if !out.is_finite() {
        return Err(Error::numeric("forward", "non-finite layer output"));
    }

    let record = if capture {
        Some(ActivationRecord {
            layer_input: x.clone(),
            queries,
            keys,
            values,
            head_outputs,
            attention_output: attn,
            layer_output: out.clone(),
        })
    } else {
        None
    };
    Ok((out, record))
}

/// Uncompressed forward pass.
pub fn forward(
    cfg: &DecoderConfig,
    layer: &DecoderLayerParams,
    x: &Matrix,
    capture: bool,
) -> Result<(Matrix, Option<ActivationRecord>)> {
    layer_forward(cfg, layer, x, None, capture)
}

/// Forward pass with keys reconstructed through the shared key basis and
/// values through per-KV-head bases.
pub fn forward_compressed(
    cfg: &DecoderConfig,
    layer: &DecoderLayerParams,
    x: &Matrix,
    key_basis: &Matrix,
    value_bases: &[Matrix],
) -> Result<Matrix> {
    let comp = Compression {
        key_basis,
        value_bases,
    };
    Ok(layer_forward(cfg, layer, x, Some(&comp), false)?.0)
}

/// Compressed forward that also captures activations (the diagnostics module
/// needs the compressed attention output, pre-residual).
pub fn forward_compressed_with_record(
    cfg: &DecoderConfig,
    layer: &DecoderLayerParams,
    x: &Matrix,
    key_basis: &Matrix,
    value_bases: &[Matrix],
) -> Result<(Matrix, ActivationRecord)> {
    let comp = Compression {
        key_basis,
        value_bases,
    };
    let (out, record) = layer_forward(cfg, layer, x, Some(&comp), true)?;
    Ok((out, record.expect("capture requested")))
}

/// Layer with the projections folded into the attention weights: scores come
/// from rank-r_K query/key projections and the value pathway caches rank-r_V
/// states, with the basis transposes absorbed into the output projection.
#[derive(Debug, Clone)]
pub struct FoldedLayer {
    config: DecoderConfig,
    per_head_wq: Vec<Matrix>,
    per_group_wk: Vec<Matrix>,
    per_group_wv: Vec<Matrix>,
    per_head_wo: Vec<Matrix>,
    norm1: NormParams,
    norm2: NormParams,
    mlp: MlpParams,
}

/// Fold the bases into factored projection weights. The folded layer
/// computes scores as `(Q P_K)(K P_K)^T` and the value path as
/// `(V_h P_V,h)(P_V,h^T W_O,h)`, matching `forward_compressed` output.
pub fn fold_bases(
    cfg: &DecoderConfig,
    layer: &DecoderLayerParams,
    key_basis: &Matrix,
    value_bases: &[Matrix],
) -> Result<FoldedLayer> {
    let comp = Compression {
        key_basis,
        value_bases,
    };
    validate_compression(cfg, &comp)?;
    if cfg.rope_enabled {
        return Err(Error::Config(
            "fold_bases requires rope disabled: rotary keys cannot absorb a fixed basis".into(),
        ));
    }
    let d_h = cfg.d_h;
    let mut per_head_wq = Vec::with_capacity(cfg.n_heads_q);
    let mut per_head_wo = Vec::with_capacity(cfg.n_heads_q);
    for h in 0..cfg.n_heads_q {
        let g = cfg.kv_head_of(h);
        per_head_wq.push(layer.w_q.slice_cols(h * d_h, d_h)?.matmul(key_basis)?);
        // Rows [h*d_h, (h+1)*d_h) of W_O belong to this head's output block.
        let mut wo_block = Matrix::zeros(d_h, cfg.d_model);
        for i in 0..d_h {
            for j in 0..cfg.d_model {
                wo_block.set(i, j, layer.w_o.get(h * d_h + i, j));
            }
        }
        per_head_wo.push(value_bases[g].transpose().matmul(&wo_block)?);
    }
    let mut per_group_wk = Vec::with_capacity(cfg.n_heads_kv);
    let mut per_group_wv = Vec::with_capacity(cfg.n_heads_kv);
    for g in 0..cfg.n_heads_kv {
        per_group_wk.push(layer.w_k.slice_cols(g * d_h, d_h)?.matmul(key_basis)?);
        per_group_wv.push(layer.w_v.slice_cols(g * d_h, d_h)?.matmul(&value_bases[g])?);
    }
    Ok(FoldedLayer {
        config: cfg.clone(),
        per_head_wq,
        per_group_wk,
        per_group_wv,
        per_head_wo,
        norm1: layer.norm1.clone(),
        norm2: layer.norm2.clone(),
        mlp: layer.mlp.clone(),
    })
}

impl FoldedLayer {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let cfg = &self.config;
        let normed = apply_norm(x, &self.norm1, cfg.norm_kind);
        let scale = 1.0 / (cfg.d_h as f64).sqrt();
        let compressed_k: Vec<Matrix> = self
            .per_group_wk
            .iter()
            .map(|w| normed.matmul(w))
            .collect::<Result<_>>()?;
        let compressed_v: Vec<Matrix> = self
            .per_group_wv
            .iter()
            .map(|w| normed.matmul(w))
            .collect::<Result<_>>()?;
        let mut attn: Option<Matrix> = None;
        for h in 0..cfg.n_heads_q {
            let g = cfg.kv_head_of(h);
            let q = normed.matmul(&self.per_head_wq[h])?;
            let scores = q.matmul(&compressed_k[g].transpose())?.scale(scale);
            let probs = causal_softmax(&scores);
            let head = probs
                .matmul(&compressed_v[g])?
                .matmul(&self.per_head_wo[h])?;
            attn = Some(match attn {
                Some(acc) => acc.add(&head)?,
                None => head,
            });
        }
        let y = x.add(&attn.expect("at least one head"))?;
        let normed2 = apply_norm(&y, &self.norm2, cfg.norm_kind);
        let mlp_out = apply_mlp(&normed2, &self.mlp)?;
        y.add(&mlp_out)
    }
}

/// Uncompressed forward through the whole stack, recording every layer's
/// activations for every input sequence. Returned as `[layer][sequence]`.
pub fn capture_calibration(
    stack: &DecoderStack,
    inputs: &[Matrix],
) -> Result<Vec<Vec<ActivationRecord>>> {
    let mut records: Vec<Vec<ActivationRecord>> =
        (0..stack.layers.len()).map(|_| Vec::new()).collect();
    for input in inputs {
        let mut x = input.clone();
        for (l, layer) in stack.layers.iter().enumerate() {
            let (out, record) = forward(&stack.config, layer, &x, true)?;
            records[l].push(record.expect("capture requested"));
            x = out;
        }
    }
    Ok(records)
}

/// Standard rotary rotation of one per-head matrix by token position.
fn rope_rotate(m: &Matrix, positions: &[usize]) -> Result<Matrix> {
    let d = m.cols();
    if d % 2 != 0 {
        return Err(Error::Config(
            "rotary embeddings require an even per-head width".into(),
        ));
    }
    if positions.len() != m.rows() {
        return Err(Error::dimension(
            "apply_rope",
            format!("{} positions for {} rows", positions.len(), m.rows()),
        ));
    }
    let mut out = Matrix::zeros(m.rows(), d);
    for (i, &pos) in positions.iter().enumerate() {
        for j in 0..d / 2 {
            let theta = pos as f64 * ROPE_BASE.powf(-2.0 * j as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            let a = m.get(i, 2 * j);
            let b = m.get(i, 2 * j + 1);
            out.set(i, 2 * j, c * a - s * b);
            out.set(i, 2 * j + 1, s * a + c * b);
        }
    }
    Ok(out)
}

/// Rotary rotation of per-head query and key matrices by token position.
pub fn apply_rope(q: &Matrix, k: &Matrix, positions: &[usize]) -> Result<(Matrix, Matrix)> {
    Ok((rope_rotate(q, positions)?, rope_rotate(k, positions)?))
}
