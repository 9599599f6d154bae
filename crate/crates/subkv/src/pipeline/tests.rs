use super::*;
use crate::decoder::{DecoderConfig, MlpKind, NormKind};
use crate::stiefel::TrainConfig;

/// Small but complete config so the whole pipeline runs in seconds.
fn small_run_config(out_dir: &Path) -> RunConfig {
    RunConfig {
        decoder: DecoderConfig {
            d_model: 16,
            n_heads_q: 4,
            n_heads_kv: 2,
            d_h: 4,
            d_ff: 24,
            norm_kind: NormKind::RmsNorm,
            mlp_kind: MlpKind::SiluGated,
            rope_enabled: false,
            n_layers: 2,
        },
        train: TrainConfig {
            max_epochs: 2,
            patience: 1,
            ..TrainConfig::default()
        },
        ranks: crate::config::RankConfig {
            fractions: vec![0.5, 0.75],
            include_full_rank: true,
        },
        calibration: crate::config::CalibrationConfig {
            n_sequences: 4,
            seq_len: 8,
            seed: 0,
        },
        policy: Default::default(),
        paths: crate::config::PathsConfig {
            out_dir: out_dir.display().to_string(),
        },
    }
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("subkv-pipeline-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn calibrate_writes_expected_sizes_and_is_deterministic() {
    let dir = temp_dir("calibrate");
    let out = OutPaths::new(&dir);
    let cfg = small_run_config(&dir);
    let summary = cmd_calibrate(&cfg, &out, None).unwrap();
    assert_eq!(summary.n_rows, 32);
    assert_eq!(summary.n_layers, 2);
    let bytes = std::fs::read(out.activations()).unwrap();
    // Header plus L * n * d_model doubles.
    assert_eq!(bytes.len(), 12 + 2 * 32 * 16 * 8);

    let first = std::fs::read(out.activations()).unwrap();
    cmd_calibrate(&cfg, &out, None).unwrap();
    let second = std::fs::read(out.activations()).unwrap();
    assert_eq!(first, second, "same seed must give byte-identical output");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn calibrate_missing_dir_is_io_error() {
    let dir = temp_dir("calibrate-missing");
    let missing = dir.join("nope");
    let out = OutPaths::new(&missing);
    let cfg = small_run_config(&missing);
    let err = cmd_calibrate(&cfg, &out, None).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn external_activation_ingestion_round_trip() {
    let dir = temp_dir("ingest");
    let out = OutPaths::new(&dir);
    let cfg = small_run_config(&dir);
    // Produce a dump with one calibrate run, then ingest it as external.
    cmd_calibrate(&cfg, &out, None).unwrap();
    let dump = out.activations();
    let external = dir.join("external.bin");
    std::fs::copy(&dump, &external).unwrap();
    let summary = cmd_calibrate(&cfg, &out, Some(&external)).unwrap();
    assert_eq!(summary.n_rows, 32);
    // Ingesting a dump with the wrong shape is a stale-artifact error.
    let mut bad_cfg = cfg.clone();
    bad_cfg.calibration.n_sequences = 3;
    let err = cmd_calibrate(&bad_cfg, &out, Some(&external)).unwrap_err();
    assert!(matches!(err, Error::StaleArtifact { .. }), "{err}");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn full_pipeline_baseline_path() {
    let dir = temp_dir("baseline-pipeline");
    let out = OutPaths::new(&dir);
    let cfg = small_run_config(&dir);
    cmd_calibrate(&cfg, &out, None).unwrap();
    let summary = cmd_train(&cfg, &out, Method::KSvd).unwrap();
    assert!(summary.basis_path.exists());
    assert!(summary.surface_path.exists());

    // Surface corner at full rank is exact.
    let doc: SurfaceFile = crate::formats::from_json_bytes(
        &std::fs::read(out.surface(Method::KSvd)).unwrap(),
        "<surface>",
    )
    .unwrap();
    for s in &doc.surfaces {
        let i = s.ranks_k.iter().position(|&r| r == 4).unwrap();
        let j = s.ranks_v.iter().position(|&r| r == 4).unwrap();
        assert!(s.get(i, j) < 1e-8);
    }

    let alloc = cmd_allocate(
        &cfg,
        &out,
        &out.surface(Method::KSvd),
        PolicyKind::Pareto,
        0.2,
        None,
    )
    .unwrap();
    assert_eq!(alloc.allocation.choices.len(), 2);
    let eval = cmd_eval(&cfg, &out, &out.basis(Method::KSvd), &out.allocation()).unwrap();
    assert!(eval.csv.starts_with("scope,layer,r_k,r_v,delta,kv_ratio\n"));
    assert_eq!(eval.csv.lines().count(), 1 + 2 + 1);
    assert!(eval.aggregate_delta >= 0.0);

    // Diagnose over the single store.
    let rows = cmd_diagnose(&cfg, &out, &[out.basis(Method::KSvd)], 2, 2).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(out.diagnostics_csv().exists());
    for name in ["attn_rel_err", "layer_rel_err", "mean_cosine"] {
        assert!(out.metric_svg(name).exists());
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn uniform_allocation_needs_ranks_and_full_rank_eval_is_exact() {
    let dir = temp_dir("uniform");
    let out = OutPaths::new(&dir);
    let cfg = small_run_config(&dir);
    cmd_calibrate(&cfg, &out, None).unwrap();
    cmd_train(&cfg, &out, Method::Eigen).unwrap();
    let err = cmd_allocate(
        &cfg,
        &out,
        &out.surface(Method::Eigen),
        PolicyKind::Uniform,
        0.1,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Usage(_)));

    cmd_allocate(
        &cfg,
        &out,
        &out.surface(Method::Eigen),
        PolicyKind::Uniform,
        0.1,
        Some((4, 4)),
    )
    .unwrap();
    let eval = cmd_eval(&cfg, &out, &out.basis(Method::Eigen), &out.allocation()).unwrap();
    assert!(
        eval.aggregate_delta < 1e-8,
        "full-rank allocation must evaluate exactly, got {}",
        eval.aggregate_delta
    );
    assert_eq!(eval.aggregate_ratio, 1.0);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn stale_artifacts_are_rejected() {
    let dir = temp_dir("stale");
    let out = OutPaths::new(&dir);
    let cfg = small_run_config(&dir);
    cmd_calibrate(&cfg, &out, None).unwrap();
    cmd_train(&cfg, &out, Method::KSvd).unwrap();

    // A different seed changes the fingerprint: training must refuse.
    let mut other = cfg.clone();
    other.calibration.seed = 99;
    let err = cmd_train(&other, &out, Method::KSvd).unwrap_err();
    assert!(matches!(err, Error::StaleArtifact { .. }), "{err}");

    let err = cmd_allocate(
        &other,
        &out,
        &out.surface(Method::KSvd),
        PolicyKind::Pareto,
        0.1,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::StaleArtifact { .. }));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn weighted_pareto_with_unit_weights_matches_pareto_bytes() {
    // On a stack too short for the ramp to act differently... the ramp always
    // applies; instead check the documented equivalence directly through the
    // pipeline by comparing against manually weighted allocation.
    let dir = temp_dir("weighted");
    let out = OutPaths::new(&dir);
    let cfg = small_run_config(&dir);
    cmd_calibrate(&cfg, &out, None).unwrap();
    cmd_train(&cfg, &out, Method::KSvd).unwrap();
    let doc: SurfaceFile = crate::formats::from_json_bytes(
        &std::fs::read(out.surface(Method::KSvd)).unwrap(),
        "<surface>",
    )
    .unwrap();
    let pareto = crate::surface::allocate_pareto(&doc.surfaces, 0.2, doc.d_h).unwrap();
    let unit = crate::surface::SensitivityWeights(vec![1.0; doc.surfaces.len()]);
    let weighted =
        crate::surface::allocate_weighted_pareto(&doc.surfaces, 0.2, &unit, doc.d_h).unwrap();
    assert_eq!(pareto.choices, weighted.choices);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn eval_rejects_mismatched_method_artifacts() {
    let dir = temp_dir("method-mismatch");
    let out = OutPaths::new(&dir);
    let cfg = small_run_config(&dir);
    cmd_calibrate(&cfg, &out, None).unwrap();
    cmd_train(&cfg, &out, Method::KSvd).unwrap();
    cmd_train(&cfg, &out, Method::Eigen).unwrap();
    cmd_allocate(
        &cfg,
        &out,
        &out.surface(Method::Eigen),
        PolicyKind::Pareto,
        0.2,
        None,
    )
    .unwrap();
    let err = cmd_eval(&cfg, &out, &out.basis(Method::KSvd), &out.allocation()).unwrap_err();
    assert!(matches!(err, Error::StaleArtifact { .. }), "{err}");
    std::fs::remove_dir_all(&dir).unwrap();
}
