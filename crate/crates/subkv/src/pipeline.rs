//! Operator-facing pipeline: each command reads and writes the persistence
//! formats, with atomic file writes and config-fingerprint staleness checks.
//! Given identical config and seed, every command is byte-idempotent.

use crate::baselines::{build_store, BaselineKind};
use crate::config::RunConfig;
use crate::decoder::{forward, init_stack, ActivationRecord, DecoderStack};
use crate::diagnostics::{compare_methods, diagnostics_csv, metric_charts, LayerDiagnostics};
use crate::error::{Error, Result};
use crate::formats::{
    read_activations_file, read_basis_file, read_weights_file, to_json_bytes,
    write_activations_file, write_basis_file, write_weights_file, AllocationFile, SurfaceFile,
};
use crate::linalg::{derive_seed, random_gaussian, Matrix, RngState};
use crate::stiefel::{layer_output_delta, train_key_basis, train_value_bases};
use crate::store::{BasisStore, LayerBases, Method};
use crate::surface::{
    allocate_pareto, allocate_uniform, allocate_weighted_pareto, sensitivity_weights,
    ErrorSurface, PolicyKind, RankAllocation,
};
use std::path::{Path, PathBuf};

const EVAL_SEED_TAG: u64 = 0x6576; // derives the held-out stream from the calibration seed
const KEY_TAG: u64 = 0;
const VALUE_TAG: u64 = 1;

/// Artifact locations under one output directory.
#[derive(Debug, Clone)]
pub struct OutPaths {
    pub root: PathBuf,
}

impl OutPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutPaths { root: root.into() }
    }

    pub fn activations(&self) -> PathBuf {
        self.root.join("activations.bin")
    }
    pub fn weights(&self) -> PathBuf {
        self.root.join("weights.bin")
    }
    pub fn basis(&self, method: Method) -> PathBuf {
        self.root.join(format!("basis_{method}.stf"))
    }
    pub fn surface(&self, method: Method) -> PathBuf {
        self.root.join(format!("surface_{method}.json"))
    }
    pub fn training_log(&self, method: Method) -> PathBuf {
        self.root.join(format!("training_log_{method}.csv"))
    }
    pub fn allocation(&self) -> PathBuf {
        self.root.join("allocation.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn diagnostics_csv(&self) -> PathBuf {
        self.root.join("diagnostics.csv")
    }
    pub fn metric_svg(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.svg"))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(parent) = parent {
        if !parent.exists() {
            return Err(io_err(
                parent,
                std::io::Error::new(std::io::ErrorKind::NotFound, "output directory missing"),
            ));
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

/// Seeded Gaussian token-embedding sequences used as calibration data.
pub fn calibration_inputs(cfg: &RunConfig) -> Vec<Matrix> {
    let mut rng = RngState::new(cfg.calibration.seed);
    (0..cfg.calibration.n_sequences)
        .map(|_| random_gaussian(cfg.calibration.seq_len, cfg.decoder.d_model, &mut rng))
        .collect()
}

/// Held-out evaluation sequences, disjoint from calibration by seed
/// derivation.
pub fn eval_inputs(cfg: &RunConfig, n_sequences: usize) -> Vec<Matrix> {
    let mut rng = RngState::new(derive_seed(cfg.calibration.seed, &[EVAL_SEED_TAG]));
    (0..n_sequences)
        .map(|_| random_gaussian(cfg.calibration.seq_len, cfg.decoder.d_model, &mut rng))
        .collect()
}

/// Splits per-layer activation blocks into per-sequence records by running
/// each layer on its own recorded input (layer-local, so externally dumped
/// activations slot in without a chained forward pass).
fn records_from_layer_inputs(
    stack: &DecoderStack,
    layer_inputs: &[Matrix],
    seq_len: usize,
) -> Result<Vec<Vec<ActivationRecord>>> {
    let mut records = Vec::with_capacity(stack.layers.len());
    for (l, layer) in stack.layers.iter().enumerate() {
        let block = &layer_inputs[l];
        if block.rows() % seq_len != 0 {
            return Err(Error::Contract {
                op: "records_from_layer_inputs",
                detail: format!(
                    "layer {l}: {} rows not divisible by sequence length {seq_len}",
                    block.rows()
                ),
            });
        }
        let mut per_seq = Vec::with_capacity(block.rows() / seq_len);
        for s in 0..block.rows() / seq_len {
            let mut x = Matrix::zeros(seq_len, block.cols());
            for i in 0..seq_len {
                let src = block.row(s * seq_len + i);
                x.row_mut(i).copy_from_slice(src);
            }
            let (_, record) = forward(&stack.config, layer, &x, true)?;
            per_seq.push(record.expect("capture requested"));
        }
        records.push(per_seq);
    }
    Ok(records)
}

#[derive(Debug)]
pub struct CalibrateSummary {
    pub activations_path: PathBuf,
    pub weights_path: PathBuf,
    pub n_rows: usize,
    pub n_layers: usize,
}

/// Writes the full-defaults config template.
pub fn cmd_init_config(path: &Path) -> Result<()> {
    atomic_write(path, RunConfig::default().to_json().as_bytes())
}

/// Initializes the seeded stack, records every layer's calibration inputs
/// (or ingests an external activation dump), and persists both artifacts.
pub fn cmd_calibrate(
    cfg: &RunConfig,
    out: &OutPaths,
    external_activations: Option<&Path>,
) -> Result<CalibrateSummary> {
    cfg.validate()?;
    let mut rng = RngState::new(cfg.calibration.seed);
    let stack = init_stack(&cfg.decoder, &mut rng)?;
    let layer_inputs: Vec<Matrix> = match external_activations {
        Some(path) => {
            let data = read_file(path)?;
            let layers = read_activations_file(&data, &path.display().to_string())?;
            if layers.len() != cfg.decoder.n_layers {
                return Err(Error::StaleArtifact {
                    path: path.display().to_string(),
                    detail: format!(
                        "dump has {} layers, config expects {}",
                        layers.len(),
                        cfg.decoder.n_layers
                    ),
                });
            }
            let expect_rows = cfg.calibration.n_sequences * cfg.calibration.seq_len;
            if layers[0].shape() != (expect_rows, cfg.decoder.d_model) {
                return Err(Error::StaleArtifact {
                    path: path.display().to_string(),
                    detail: format!(
                        "dump blocks are {:?}, config expects {expect_rows}x{}",
                        layers[0].shape(),
                        cfg.decoder.d_model
                    ),
                });
            }
            layers
        }
        None => {
            let inputs = calibration_inputs(cfg);
            let records = crate::decoder::capture_calibration(&stack, &inputs)?;
            records
                .iter()
                .map(|layer_records| {
                    let blocks: Vec<&Matrix> =
                        layer_records.iter().map(|r| &r.layer_input).collect();
                    Matrix::concat_rows(&blocks)
                })
                .collect::<Result<_>>()?
        }
    };
    let activations = write_activations_file(&layer_inputs)?;
    atomic_write(&out.activations(), &activations)?;
    let weights = write_weights_file(&stack, &cfg.fingerprint());
    atomic_write(&out.weights(), &weights)?;
    Ok(CalibrateSummary {
        activations_path: out.activations(),
        weights_path: out.weights(),
        n_rows: layer_inputs[0].rows(),
        n_layers: layer_inputs.len(),
    })
}

fn load_calibration(cfg: &RunConfig, out: &OutPaths) -> Result<(DecoderStack, Vec<Vec<ActivationRecord>>)> {
    let weights_path = out.weights();
    let (stack, fingerprint) =
        read_weights_file(&read_file(&weights_path)?, &weights_path.display().to_string())?;
    if fingerprint != cfg.fingerprint() {
        return Err(Error::StaleArtifact {
            path: weights_path.display().to_string(),
            detail: format!(
                "weights fingerprint {fingerprint} does not match config {}; re-run calibrate",
                cfg.fingerprint()
            ),
        });
    }
    let activations_path = out.activations();
    let layer_inputs = read_activations_file(
        &read_file(&activations_path)?,
        &activations_path.display().to_string(),
    )?;
    if layer_inputs.len() != stack.layers.len() {
        return Err(Error::StaleArtifact {
            path: activations_path.display().to_string(),
            detail: "activation dump layer count does not match the stack".into(),
        });
    }
    let records = records_from_layer_inputs(&stack, &layer_inputs, cfg.calibration.seq_len)?;
    Ok((stack, records))
}

/// Error surfaces of one basis store over calibration records.
pub fn surfaces_from_store(
    stack: &DecoderStack,
    records: &[Vec<ActivationRecord>],
    store: &BasisStore,
) -> Result<Vec<ErrorSurface>> {
    let mut surfaces = Vec::with_capacity(stack.layers.len());
    for (l, layer) in stack.layers.iter().enumerate() {
        let mut delta = vec![vec![0.0; store.ranks_v.len()]; store.ranks_k.len()];
        for (i, row) in delta.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = layer_output_delta(
                    &stack.config,
                    layer,
                    &records[l],
                    &store.layers[l].key[i],
                    &store.layers[l].value[j],
                )?;
            }
        }
        let surface = ErrorSurface::new(l, store.ranks_k.clone(), store.ranks_v.clone(), delta)?;
        surface.validate(Some(stack.config.d_h))?;
        surfaces.push(surface);
    }
    Ok(surfaces)
}

#[derive(Debug)]
pub struct TrainSummary {
    pub basis_path: PathBuf,
    pub surface_path: PathBuf,
    pub method: Method,
    pub n_cells: usize,
}

/// Learned-basis training (per layer, per candidate rank) or closed-form
/// baseline construction, followed by the shared surface grid.
pub fn cmd_train(cfg: &RunConfig, out: &OutPaths, method: Method) -> Result<TrainSummary> {
    cfg.validate()?;
    let (stack, records) = load_calibration(cfg, out)?;
    let ranks = cfg.candidate_ranks()?;
    let store = match method {
        Method::Stief => {
            let mut layers = Vec::with_capacity(stack.layers.len());
            for (l, layer) in stack.layers.iter().enumerate() {
                let ctx = format!("layer {l}");
                let mut key = Vec::new();
                let mut key_logs = Vec::new();
                for &r_k in &ranks {
                    let mut rng = RngState::new(derive_seed(
                        cfg.train.seed,
                        &[l as u64, KEY_TAG, r_k as u64],
                    ));
                    let (basis, log) =
                        train_key_basis(&stack.config, layer, &records[l], r_k, &cfg.train, &mut rng)
                            .map_err(|e| e.with_context(&ctx))?;
                    key.push(basis);
                    key_logs.push(log);
                }
                let mut value = Vec::new();
                let mut value_logs = Vec::new();
                for &r_v in &ranks {
                    let mut rng = RngState::new(derive_seed(
                        cfg.train.seed,
                        &[l as u64, VALUE_TAG, r_v as u64],
                    ));
                    let (bases, log) = train_value_bases(
                        &stack.config,
                        layer,
                        &records[l],
                        r_v,
                        &cfg.train,
                        &mut rng,
                    )
                    .map_err(|e| e.with_context(&ctx))?;
                    value.push(bases);
                    value_logs.push(log);
                }
                layers.push(LayerBases {
                    key,
                    value,
                    key_logs,
                    value_logs,
                });
            }
            BasisStore {
                method: Method::Stief,
                d_h: stack.config.d_h,
                n_heads_kv: stack.config.n_heads_kv,
                ranks_k: ranks.clone(),
                ranks_v: ranks.clone(),
                layers,
            }
        }
        Method::KSvd | Method::Eigen | Method::KqSvd => {
            let kind = match method {
                Method::KSvd => BaselineKind::KSvd,
                Method::Eigen => BaselineKind::Eigen,
                Method::KqSvd => BaselineKind::KqSvd,
                Method::Stief => unreachable!(),
            };
            let w_o: Vec<&Matrix> = stack.layers.iter().map(|l| &l.w_o).collect();
            build_store(kind, &stack.config, &w_o, &records, &ranks, &ranks)?
        }
    };
    store.audit_orthonormality(1e-8)?;
    let surfaces = surfaces_from_store(&stack, &records, &store)?;

    atomic_write(&out.basis(method), &write_basis_file(&store))?;
    let doc = SurfaceFile {
        fingerprint: cfg.fingerprint(),
        method,
        d_h: stack.config.d_h,
        surfaces,
    };
    atomic_write(&out.surface(method), &to_json_bytes(&doc))?;
    atomic_write(&out.training_log(method), store.training_log_csv().as_bytes())?;
    Ok(TrainSummary {
        basis_path: out.basis(method),
        surface_path: out.surface(method),
        method,
        n_cells: stack.layers.len() * ranks.len() * 2,
    })
}

/// Rank allocation from a surface file under the chosen policy.
pub fn cmd_allocate(
    cfg: &RunConfig,
    out: &OutPaths,
    surface_path: &Path,
    policy: PolicyKind,
    epsilon: f64,
    uniform_ranks: Option<(usize, usize)>,
) -> Result<AllocationFile> {
    cfg.validate()?;
    let doc: SurfaceFile = crate::formats::from_json_bytes(
        &read_file(surface_path)?,
        &surface_path.display().to_string(),
    )?;
    if doc.fingerprint != cfg.fingerprint() {
        return Err(Error::StaleArtifact {
            path: surface_path.display().to_string(),
            detail: format!(
                "surface fingerprint {} does not match config {}",
                doc.fingerprint,
                cfg.fingerprint()
            ),
        });
    }
    for s in &doc.surfaces {
        s.validate(Some(doc.d_h))?;
    }
    let allocation: RankAllocation = match policy {
        PolicyKind::Uniform => {
            let (r_k, r_v) = uniform_ranks.ok_or_else(|| {
                Error::Usage("uniform policy requires explicit r_k and r_v".into())
            })?;
            allocate_uniform(&doc.surfaces, r_k, r_v, doc.d_h)?
        }
        PolicyKind::Pareto => allocate_pareto(&doc.surfaces, epsilon, doc.d_h)?,
        PolicyKind::WeightedPareto => {
            let weights = sensitivity_weights(doc.surfaces.len());
            allocate_weighted_pareto(&doc.surfaces, epsilon, &weights, doc.d_h)?
        }
    };
    let file = AllocationFile {
        fingerprint: cfg.fingerprint(),
        method: doc.method,
        allocation,
    };
    atomic_write(&out.allocation(), &to_json_bytes(&file))?;
    Ok(file)
}

#[derive(Debug)]
pub struct EvalSummary {
    pub csv: String,
    pub aggregate_delta: f64,
    pub aggregate_ratio: f64,
}

/// Held-out evaluation of an allocation: per-layer relative output error at
/// the allocated ranks, plus aggregates.
pub fn cmd_eval(
    cfg: &RunConfig,
    out: &OutPaths,
    basis_path: &Path,
    allocation_path: &Path,
) -> Result<EvalSummary> {
    cfg.validate()?;
    let weights_path = out.weights();
    let (stack, fingerprint) =
        read_weights_file(&read_file(&weights_path)?, &weights_path.display().to_string())?;
    if fingerprint != cfg.fingerprint() {
        return Err(Error::StaleArtifact {
            path: weights_path.display().to_string(),
            detail: "weights do not match the active config".into(),
        });
    }
    let store = read_basis_file(&read_file(basis_path)?, &basis_path.display().to_string())?;
    let alloc_file: AllocationFile = crate::formats::from_json_bytes(
        &read_file(allocation_path)?,
        &allocation_path.display().to_string(),
    )?;
    if alloc_file.fingerprint != cfg.fingerprint() {
        return Err(Error::StaleArtifact {
            path: allocation_path.display().to_string(),
            detail: "allocation does not match the active config".into(),
        });
    }
    if alloc_file.method != store.method {
        return Err(Error::StaleArtifact {
            path: allocation_path.display().to_string(),
            detail: format!(
                "allocation came from method {}, basis file holds {}",
                alloc_file.method, store.method
            ),
        });
    }
    if store.n_layers() != stack.layers.len() || store.d_h != stack.config.d_h {
        return Err(Error::StaleArtifact {
            path: basis_path.display().to_string(),
            detail: "basis store shape does not match the stack".into(),
        });
    }

    let inputs = eval_inputs(cfg, cfg.calibration.n_sequences);
    let records = crate::decoder::capture_calibration(&stack, &inputs)?;
    let mut csv = String::from("scope,layer,r_k,r_v,delta,kv_ratio\n");
    let mut delta_sum = 0.0;
    for choice in &alloc_file.allocation.choices {
        let l = choice.layer;
        let key = store.key_basis(l, choice.r_k)?;
        let values = store.value_bases(l, choice.r_v)?;
        let delta = layer_output_delta(&stack.config, &stack.layers[l], &records[l], key, values)?;
        delta_sum += delta;
        csv.push_str(&format!(
            "layer,{l},{},{},{delta},{}\n",
            choice.r_k, choice.r_v, choice.ratio
        ));
    }
    let n = alloc_file.allocation.choices.len() as f64;
    let aggregate_delta = delta_sum / n;
    let aggregate_ratio = alloc_file.allocation.aggregate_ratio;
    csv.push_str(&format!(
        "aggregate,,,,{aggregate_delta},{aggregate_ratio}\n"
    ));
    atomic_write(&out.metrics(), csv.as_bytes())?;
    Ok(EvalSummary {
        csv,
        aggregate_delta,
        aggregate_ratio,
    })
}

/// Method comparison on held-out data at one rank pair: CSV plus one SVG
/// line chart per metric.
pub fn cmd_diagnose(
    cfg: &RunConfig,
    out: &OutPaths,
    basis_paths: &[PathBuf],
    r_k: usize,
    r_v: usize,
) -> Result<Vec<LayerDiagnostics>> {
    cfg.validate()?;
    let weights_path = out.weights();
    let (stack, fingerprint) =
        read_weights_file(&read_file(&weights_path)?, &weights_path.display().to_string())?;
    if fingerprint != cfg.fingerprint() {
        return Err(Error::StaleArtifact {
            path: weights_path.display().to_string(),
            detail: "weights do not match the active config".into(),
        });
    }
    let stores: Vec<BasisStore> = basis_paths
        .iter()
        .map(|p| read_basis_file(&read_file(p)?, &p.display().to_string()))
        .collect::<Result<_>>()?;
    let store_refs: Vec<&BasisStore> = stores.iter().collect();
    let inputs = eval_inputs(cfg, cfg.calibration.n_sequences);
    let rows = compare_methods(&stack, &inputs, &store_refs, r_k, r_v)?;
    atomic_write(&out.diagnostics_csv(), diagnostics_csv(&rows).as_bytes())?;
    for (name, chart) in metric_charts(&rows) {
        atomic_write(&out.metric_svg(&name), chart.as_bytes())?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
