use super::predictor::{PredictorParams, DEFAULT_HIDDEN_FACTOR};
use super::{compute_stats, ActivationStats};
use crate::autodiff::{causal_mask, qr_q, Tape, Var};
use crate::baselines::right_singular_basis;
use crate::decoder::{
    causal_softmax, ActivationRecord, DecoderConfig, DecoderLayerParams, MlpParams, NormKind,
};
use crate::error::{Error, Result};
use crate::linalg::{qr_decompose, truncate_columns, Matrix, RngState};
use crate::store::{EpochStat, TrainingLog};
use serde::{Deserialize, Serialize};

/// Identity jitter added to the predictor output when its QR turns out
/// rank-deficient; the step is rebuilt rather than silently corrupted.
pub const QR_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size_keys: usize,
    pub batch_size_values: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Hidden width of the predictor as a multiple of d_h.
    pub hidden_width_factor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 50,
            patience: 5,
            min_delta: 1e-6,
            batch_size_keys: 1,
            batch_size_values: 4,
            schedule: Schedule::Cosine,
            seed: 0,
            hidden_width_factor: DEFAULT_HIDDEN_FACTOR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.learning_rate,
            self.weight_decay,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.min_delta,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(
                "train config requires positive finite hyperparameters".into(),
            ));
        }
        if self.max_epochs == 0
            || self.batch_size_keys == 0
            || self.batch_size_values == 0
            || self.hidden_width_factor == 0
        {
            return Err(Error::Config("train config counts must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }

    pub fn hidden_width(&self, d_h: usize) -> usize {
        self.hidden_width_factor * d_h
    }

    fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Decoupled-weight-decay Adam over a flat list of parameter matrices.
struct AdamW {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: usize,
}

impl AdamW {
    fn new(params: &[&Matrix]) -> Self {
        AdamW {
            m: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            step: 0,
        }
    }

    fn apply(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [&mut Matrix], grads: &[Matrix]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.adam_beta1.powi(t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = 1.0 - lr * cfg.weight_decay;
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = cfg.adam_beta1 * *mv + (1.0 - cfg.adam_beta1) * gv;
                *vv = cfg.adam_beta2 * *vv + (1.0 - cfg.adam_beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Target {
    Keys,
    Values,
}

/// Shared constants of one layer registered on a fresh tape each step.
struct LayerConsts {
    w_o: Var,
    norm2_gain: Var,
    norm2_offset: Option<Var>,
    mlp: MlpConsts,
}

enum MlpConsts {
    SiluGated { w_gate: Var, w_up: Var, w_down: Var },
    Gelu { w_in: Var, w_out: Var },
}

fn register_layer_consts(tape: &mut Tape, layer: &DecoderLayerParams) -> LayerConsts {
    let w_o = tape.constant(layer.w_o.clone());
    let norm2_gain = tape.constant(layer.norm2.gain.clone());
    let norm2_offset = layer.norm2.offset.as_ref().map(|o| tape.constant(o.clone()));
    let mlp = match &layer.mlp {
        MlpParams::SiluGated {
            w_gate,
            w_up,
            w_down,
        } => MlpConsts::SiluGated {
            w_gate: tape.constant(w_gate.clone()),
            w_up: tape.constant(w_up.clone()),
            w_down: tape.constant(w_down.clone()),
        },
        MlpParams::Gelu { w_in, w_out } => MlpConsts::Gelu {
            w_in: tape.constant(w_in.clone()),
            w_out: tape.constant(w_out.clone()),
        },
    };
    LayerConsts {
        w_o,
        norm2_gain,
        norm2_offset,
        mlp,
    }
}

/// Trains the predictors of one (layer, target, rank) cell.
struct Trainer<'a> {
    dec: &'a DecoderConfig,
    layer: &'a DecoderLayerParams,
    records: &'a [ActivationRecord],
    train: &'a TrainConfig,
    rank: usize,
    target: Target,
    predictors: Vec<PredictorParams>,
    stats: Vec<ActivationStats>,
    /// Values mode: attention probabilities are independent of the value
    /// bases, so they are precomputed per (sequence, query head).
    cached_probs: Vec<Vec<Matrix>>,
}

impl<'a> Trainer<'a> {
    fn new(
        dec: &'a DecoderConfig,
        layer: &'a DecoderLayerParams,
        records: &'a [ActivationRecord],
        rank: usize,
        target: Target,
        train: &'a TrainConfig,
        rng: &mut RngState,
    ) -> Result<Self> {
        let stats = Self::pooled_stats(dec, records, target, rank)?;
        let mut predictors = Vec::with_capacity(stats.len());
        for gram in Self::pooled_grams(dec, records, target)? {
            let warm = right_singular_basis(&gram)?;
            predictors.push(PredictorParams::init(
                dec.d_h,
                train.hidden_width(dec.d_h),
                &warm,
                rng,
            )?);
        }
        Self::with_predictors(dec, layer, records, rank, target, train, predictors, stats)
    }

    fn pooled_stats(
        dec: &DecoderConfig,
        records: &[ActivationRecord],
        target: Target,
        rank: usize,
    ) -> Result<Vec<ActivationStats>> {
        if records.is_empty() {
            return Err(Error::degenerate("train_basis", "no calibration records"));
        }
        if rank == 0 || rank > dec.d_h {
            return Err(Error::dimension(
                "train_basis",
                format!("rank {rank} outside [1, {}]", dec.d_h),
            ));
        }
        match target {
            Target::Keys => {
                // One shared key basis: pool keys across KV heads and
                // sequences.
                let pooled: Vec<&Matrix> = records.iter().flat_map(|r| r.keys.iter()).collect();
                Ok(vec![compute_stats(&pooled)?])
            }
            Target::Values => (0..dec.n_heads_kv)
                .map(|g| {
                    let pooled: Vec<&Matrix> = records.iter().map(|r| &r.values[g]).collect();
                    compute_stats(&pooled)
                })
                .collect(),
        }
    }

    fn pooled_grams(
        dec: &DecoderConfig,
        records: &[ActivationRecord],
        target: Target,
    ) -> Result<Vec<Matrix>> {
        let accumulate = |blocks: Vec<&Matrix>| -> Result<Matrix> {
            let mut gram = Matrix::zeros(dec.d_h, dec.d_h);
            for b in blocks {
                gram = gram.add(&b.gram())?;
            }
            Ok(gram)
        };
        match target {
            Target::Keys => Ok(vec![accumulate(
                records.iter().flat_map(|r| r.keys.iter()).collect(),
            )?]),
            Target::Values => (0..dec.n_heads_kv)
                .map(|g| accumulate(records.iter().map(|r| &r.values[g]).collect()))
                .collect(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn with_predictors(
        dec: &'a DecoderConfig,
        layer: &'a DecoderLayerParams,
        records: &'a [ActivationRecord],
        rank: usize,
        target: Target,
        train: &'a TrainConfig,
        predictors: Vec<PredictorParams>,
        stats: Vec<ActivationStats>,
    ) -> Result<Self> {
        train.validate()?;
        let cached_probs = match target {
            Target::Keys => Vec::new(),
            Target::Values => {
                let scale = 1.0 / (dec.d_h as f64).sqrt();
                let mut all = Vec::with_capacity(records.len());
                for rec in records {
                    let mut per_head = Vec::with_capacity(dec.n_heads_q);
                    for h in 0..dec.n_heads_q {
                        let g = dec.kv_head_of(h);
                        let scores = rec.queries[h]
                            .matmul(&rec.keys[g].transpose())?
                            .scale(scale);
                        per_head.push(causal_softmax(&scores));
                    }
                    all.push(per_head);
                }
                all
            }
        };
        Ok(Trainer {
            dec,
            layer,
            records,
            train,
            rank,
            target,
            predictors,
            stats,
            cached_probs,
        })
    }

    fn batch_size(&self) -> usize {
        match self.target {
            Target::Keys => self.train.batch_size_keys,
            Target::Values => self.train.batch_size_values,
        }
        .min(self.records.len())
    }

    /// Tape the predictors, orthonormalize, truncate, and return the rank-r
    /// projections with their transposes plus the gradient leaves.
    fn taped_projections(
        &self,
        tape: &mut Tape,
        jitter: bool,
    ) -> Result<(Vec<(Var, Var)>, Vec<Vec<Var>>)> {
        let mut projections = Vec::with_capacity(self.predictors.len());
        let mut leaves = Vec::with_capacity(self.predictors.len());
        for (pred, stats) in self.predictors.iter().zip(&self.stats) {
            let s = tape.constant(stats.feature_row());
            let (mut a, pred_leaves) = pred.taped_forward(tape, s)?;
            if jitter {
                let eps = tape.constant(Matrix::identity(self.dec.d_h).scale(QR_JITTER));
                a = tape.add(a, eps)?;
            }
            let p_bar = qr_q(tape, a)?;
            let p = tape.slice_cols(p_bar, 0, self.rank)?;
            let pt = tape.transpose(p);
            projections.push((p, pt));
            leaves.push(pred_leaves);
        }
        Ok((projections, leaves))
    }

    /// Full compressed-layer loss of one sequence on the tape.
    fn taped_sequence_loss(
        &self,
        tape: &mut Tape,
        consts: &LayerConsts,
        seq: usize,
        projections: &[(Var, Var)],
    ) -> Result<Var> {
        let rec = &self.records[seq];
        let n = rec.layer_input.rows();
        let scale = 1.0 / (self.dec.d_h as f64).sqrt();
        let x = tape.constant(rec.layer_input.clone());

        let mut kv_eff: Vec<(Option<Var>, Var)> = Vec::with_capacity(self.dec.n_heads_kv);
        for g in 0..self.dec.n_heads_kv {
            match self.target {
                Target::Keys => {
                    let (p, pt) = projections[0];
                    let k = tape.constant(rec.keys[g].clone());
                    let kp = tape.matmul(k, p)?;
                    let k_tilde = tape.matmul(kp, pt)?;
                    let v = tape.constant(rec.values[g].clone());
                    kv_eff.push((Some(k_tilde), v));
                }
                Target::Values => {
                    let (p, pt) = projections[g];
                    let v = tape.constant(rec.values[g].clone());
                    let vp = tape.matmul(v, p)?;
                    let v_tilde = tape.matmul(vp, pt)?;
                    kv_eff.push((None, v_tilde));
                }
            }
        }

        let mask = match self.target {
            Target::Keys => Some(tape.constant(causal_mask(n))),
            Target::Values => None,
        };
        let mut head_outputs = Vec::with_capacity(self.dec.n_heads_q);
        for h in 0..self.dec.n_heads_q {
            let g = self.dec.kv_head_of(h);
            let probs = match self.target {
                Target::Keys => {
                    let k_tilde = kv_eff[g].0.expect("keys mode");
                    let q = tape.constant(rec.queries[h].clone());
                    let kt = tape.transpose(k_tilde);
                    let raw = tape.matmul(q, kt)?;
                    let scaled = tape.scale(raw, scale);
                    let masked = tape.add(scaled, mask.expect("keys mode"))?;
                    tape.row_softmax(masked)
                }
                Target::Values => tape.constant(self.cached_probs[seq][h].clone()),
            };
            head_outputs.push(tape.matmul(probs, kv_eff[g].1)?);
        }
        let concat = tape.concat_cols(&head_outputs)?;
        let attn = tape.matmul(concat, consts.w_o)?;
        let y = tape.add(x, attn)?;
        let normed = match self.dec.norm_kind {
            NormKind::RmsNorm => tape.rms_norm(y, consts.norm2_gain)?,
            NormKind::LayerNorm => {
                let offset = consts.norm2_offset.expect("layer norm offset");
                tape.layer_norm(y, consts.norm2_gain, offset)?
            }
        };
        let mlp_out = match &consts.mlp {
            MlpConsts::SiluGated {
                w_gate,
                w_up,
                w_down,
            } => {
                let gate_pre = tape.matmul(normed, *w_gate)?;
                let gate = tape.silu(gate_pre);
                let up = tape.matmul(normed, *w_up)?;
                let gated = tape.hadamard(gate, up)?;
                tape.matmul(gated, *w_down)?
            }
            MlpConsts::Gelu { w_in, w_out } => {
                let pre = tape.matmul(normed, *w_in)?;
                let act = tape.gelu(pre);
                tape.matmul(act, *w_out)?
            }
        };
        let out = tape.add(y, mlp_out)?;
        let reference = tape.constant(rec.layer_output.clone());
        tape.frobenius_ratio_loss(reference, out)
    }

    /// One optimizer step over a batch; returns the batch loss and the
    /// per-predictor parameter gradients.
    fn step(&self, batch: &[usize], jitter: bool) -> Result<(f64, Vec<Vec<Matrix>>)> {
        let mut tape = Tape::new();
        let (projections, leaves) = self.taped_projections(&mut tape, jitter)?;
        let consts = register_layer_consts(&mut tape, self.layer);
        let mut total: Option<Var> = None;
        for &seq in batch {
            let loss = self.taped_sequence_loss(&mut tape, &consts, seq, &projections)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, loss)?,
                None => loss,
            });
        }
        let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let loss_value = tape.value(loss).scalar_value()?;
        let grads = tape.backward(loss)?;
        let mut out = Vec::with_capacity(self.predictors.len());
        for (pred, pred_leaves) in self.predictors.iter().zip(&leaves) {
            let got: Vec<Matrix> = pred
                .params()
                .iter()
                .zip(pred_leaves)
                .map(|(p, &leaf)| grads.get_or_zeros(leaf, p.rows(), p.cols()))
                .collect();
            out.push(got);
        }
        Ok((loss_value, out))
    }

    /// Orthonormalized, truncated bases from the current parameters, with
    /// the same jitter fallback as a training step.
    fn current_bases(&self, jitter_events: &mut usize) -> Result<Vec<Matrix>> {
        let mut bases = Vec::with_capacity(self.predictors.len());
        for (pred, stats) in self.predictors.iter().zip(&self.stats) {
            let a = pred.forward(stats)?;
            let q = match qr_decompose(&a) {
                Ok((q, _)) => q,
                Err(Error::RankDeficient { .. }) => {
                    *jitter_events += 1;
                    let jittered = a.add(&Matrix::identity(self.dec.d_h).scale(QR_JITTER))?;
                    qr_decompose(&jittered)?.0
                }
                Err(e) => return Err(e),
            };
            bases.push(truncate_columns(&q, self.rank)?);
        }
        Ok(bases)
    }

    /// Mean relative layer-output error over the calibration set with the
    /// current bases; the early-stopping monitor (the training objective
    /// itself, evaluated uncompressed on the untouched pathway).
    fn monitor(&self, bases: &[Matrix]) -> Result<f64> {
        let identity = Matrix::identity(self.dec.d_h);
        let (key, values): (&Matrix, Vec<Matrix>) = match self.target {
            Target::Keys => (
                &bases[0],
                (0..self.dec.n_heads_kv).map(|_| identity.clone()).collect(),
            ),
            Target::Values => (&identity, bases.to_vec()),
        };
        super::layer_output_delta(self.dec, self.layer, self.records, key, &values)
    }

    fn run(mut self) -> Result<(Vec<Matrix>, TrainingLog)> {
        let batch = self.batch_size();
        let indices: Vec<usize> = (0..self.records.len()).collect();
        let steps_per_epoch = indices.len().div_ceil(batch);
        let total_steps = self.train.max_epochs * steps_per_epoch;

        let mut optimizer = {
            let all: Vec<&Matrix> = self.predictors.iter().flat_map(|p| p.params()).collect();
            AdamW::new(&all)
        };
        let mut log = TrainingLog::default();

        // Initial monitor: the warm-start bases are a live candidate.
        let mut init_jitter = 0usize;
        let init_bases = self.current_bases(&mut init_jitter)?;
        let mut best_loss = self.monitor(&init_bases)?;
        let mut best_bases = init_bases;
        let mut epochs_without_improvement = 0usize;
        let mut global_step = 0usize;

        for epoch in 0..self.train.max_epochs {
            let mut jitter_events = init_jitter;
            init_jitter = 0;
            let mut first_lr = None;
            for chunk in indices.chunks(batch) {
                let lr = self.train.lr_at(global_step, total_steps);
                first_lr.get_or_insert(lr);
                let (loss_value, grads) = match self.step(chunk, false) {
                    Err(Error::RankDeficient { .. }) => {
                        jitter_events += 1;
                        self.step(chunk, true)?
                    }
                    other => other?,
                };
                if !loss_value.is_finite() {
                    return Err(Error::TrainingDiverged {
                        step: global_step,
                        detail: format!("loss {loss_value} in epoch {epoch}"),
                    });
                }
                let flat_grads: Vec<Matrix> = grads.into_iter().flatten().collect();
                let mut params: Vec<&mut Matrix> = self
                    .predictors
                    .iter_mut()
                    .flat_map(|p| p.params_mut())
                    .collect();
                optimizer.apply(self.train, lr, &mut params, &flat_grads);
                global_step += 1;
            }

            let bases = self.current_bases(&mut jitter_events)?;
            let epoch_loss = self.monitor(&bases)?;
            if !epoch_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: global_step,
                    detail: format!("monitor {epoch_loss} after epoch {epoch}"),
                });
            }
            log.entries.push(EpochStat {
                epoch,
                loss: epoch_loss,
                lr: first_lr.unwrap_or(0.0),
                jitter_events,
            });
            if epoch_loss < best_loss - self.train.min_delta {
                best_loss = epoch_loss;
                best_bases = bases;
                epochs_without_improvement = 0;
            } else {
                epochs_without_improvement += 1;
                if epochs_without_improvement >= self.train.patience {
                    break;
                }
            }
        }
        Ok((best_bases, log))
    }
}

/// Trains the shared key-basis predictor of one layer at one rank; values
/// stay uncompressed during key training.
pub fn train_key_basis(
    dec: &DecoderConfig,
    layer: &DecoderLayerParams,
    records: &[ActivationRecord],
    r_k: usize,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<(Matrix, TrainingLog)> {
    let trainer = Trainer::new(dec, layer, records, r_k, Target::Keys, cfg, rng)?;
    let (mut bases, log) = trainer.run()?;
    Ok((bases.remove(0), log))
}

/// Trains one value-basis predictor per KV head jointly (a single loss over
/// all heads); keys stay uncompressed during value training.
pub fn train_value_bases(
    dec: &DecoderConfig,
    layer: &DecoderLayerParams,
    records: &[ActivationRecord],
    r_v: usize,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<(Vec<Matrix>, TrainingLog)> {
    let trainer = Trainer::new(dec, layer, records, r_v, Target::Values, cfg, rng)?;
    trainer.run()
}

/// Loss and per-parameter gradients of one key-training step built from
/// explicit predictor parameters: the hook the gradient-verification suite
/// drives finite differences through.
pub fn key_step_loss(
    dec: &DecoderConfig,
    layer: &DecoderLayerParams,
    records: &[ActivationRecord],
    r_k: usize,
    predictor: &PredictorParams,
    batch: &[usize],
) -> Result<(f64, Vec<Matrix>)> {
    let cfg = TrainConfig::default();
    let stats = Trainer::pooled_stats(dec, records, Target::Keys, r_k)?;
    let trainer = Trainer::with_predictors(
        dec,
        layer,
        records,
        r_k,
        Target::Keys,
        &cfg,
        vec![predictor.clone()],
        stats,
    )?;
    let (loss, mut grads) = trainer.step(batch, false)?;
    Ok((loss, grads.remove(0)))
}

/// Value-side counterpart of [`key_step_loss`]: one joint step over all
/// KV heads' predictors.
pub fn value_step_loss(
    dec: &DecoderConfig,
    layer: &DecoderLayerParams,
    records: &[ActivationRecord],
    r_v: usize,
    predictors: &[PredictorParams],
    batch: &[usize],
) -> Result<(f64, Vec<Vec<Matrix>>)> {
    if predictors.len() != dec.n_heads_kv {
        return Err(Error::dimension(
            "value_step_loss",
            format!(
                "expected {} predictors, got {}",
                dec.n_heads_kv,
                predictors.len()
            ),
        ));
    }
    let cfg = TrainConfig::default();
    let stats = Trainer::pooled_stats(dec, records, Target::Values, r_v)?;
    let trainer = Trainer::with_predictors(
        dec,
        layer,
        records,
        r_v,
        Target::Values,
        &cfg,
        predictors.to_vec(),
        stats,
    )?;
    trainer.step(batch, false)
}

/// Warm-start square basis for the shared key predictor: right singular
/// vectors of the pooled keys.
pub fn key_warm_start(dec: &DecoderConfig, records: &[ActivationRecord]) -> Result<Matrix> {
    let gram = Trainer::pooled_grams(dec, records, Target::Keys)?.remove(0);
    right_singular_basis(&gram)
}

/// Warm-start square bases for the per-head value predictors.
pub fn value_warm_starts(
    dec: &DecoderConfig,
    records: &[ActivationRecord],
) -> Result<Vec<Matrix>> {
    Trainer::pooled_grams(dec, records, Target::Values)?
        .iter()
        .map(right_singular_basis)
        .collect()
}
