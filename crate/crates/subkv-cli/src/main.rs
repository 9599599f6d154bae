//! Command-line driver for the KV-cache compression toolkit.
//!
//! Exit codes: 0 success, 1 runtime/numeric failure, 2 usage or config
//! errors (clap reports its own parse failures with 2 as well).

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use subkv::config::RunConfig;
use subkv::pipeline::{
    self, cmd_allocate, cmd_calibrate, cmd_diagnose, cmd_eval, cmd_init_config, cmd_train,
    OutPaths,
};
use subkv::store::Method;
use subkv::surface::PolicyKind;
use subkv::Error;

#[derive(Parser)]
#[command(
    name = "subkv",
    version,
    about = "Post-training KV-cache low-rank compression: calibration, basis training, rank allocation, evaluation, diagnostics"
)]
struct Cli {
    /// Config file (JSON); defaults are used when the flag is absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides both the calibration and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Upper bound on worker threads. The current engine is sequential, so
    /// any positive cap is honored trivially.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory (overrides paths.out_dir from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    #[value(name = "stief")]
    Stief,
    #[value(name = "k_svd")]
    KSvd,
    #[value(name = "eigen")]
    Eigen,
    #[value(name = "kq_svd")]
    KqSvd,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Stief => Method::Stief,
            MethodArg::KSvd => Method::KSvd,
            MethodArg::Eigen => Method::Eigen,
            MethodArg::KqSvd => Method::KqSvd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    #[value(name = "uniform")]
    Uniform,
    #[value(name = "pareto")]
    Pareto,
    #[value(name = "weighted_pareto")]
    WeightedPareto,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> PolicyKind {
        match p {
            PolicyArg::Uniform => PolicyKind::Uniform,
            PolicyArg::Pareto => PolicyKind::Pareto,
            PolicyArg::WeightedPareto => PolicyKind::WeightedPareto,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a full-defaults config template.
    InitConfig,
    /// Initialize the seeded stack and record per-layer calibration inputs.
    Calibrate {
        /// Ingest an externally dumped activation file instead of running
        /// the seeded forward pass.
        #[arg(long)]
        activations: Option<PathBuf>,
    },
    /// Train learned bases or compute closed-form baselines, plus the
    /// per-layer error surfaces.
    Train {
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Choose per-layer ranks from a surface file under an error budget.
    Allocate {
        /// Surface file; defaults to the learned-method surface in the
        /// output directory.
        #[arg(long)]
        surface: Option<PathBuf>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Key rank for the uniform policy.
        #[arg(long)]
        r_k: Option<usize>,
        /// Value rank for the uniform policy.
        #[arg(long)]
        r_v: Option<usize>,
    },
    /// Held-out evaluation of an allocation: per-layer and aggregate error.
    Eval {
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        allocation: Option<PathBuf>,
    },
    /// Layer-level output-preservation comparison across basis files.
    Diagnose {
        /// Basis files to compare (repeatable).
        #[arg(long = "basis", required = true)]
        bases: Vec<PathBuf>,
        #[arg(long)]
        r_k: Option<usize>,
        #[arg(long)]
        r_v: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let bytes = pipeline::read_file(path)?;
            let text = String::from_utf8(bytes).map_err(|_| Error::Format {
                path: path.display().to_string(),
                offset: 0,
                detail: "config is not UTF-8".into(),
            })?;
            RunConfig::from_json(&text, &path.display().to_string())?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.calibration.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.display().to_string();
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    // init-config only needs the target path, not a valid existing config.
    if matches!(cli.command, Command::InitConfig) {
        let path = cli
            .config
            .clone()
            .unwrap_or_else(|| PathBuf::from("subkv.json"));
        cmd_init_config(&path)?;
        println!("wrote config template to {}", path.display());
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let out = OutPaths::new(&cfg.paths.out_dir);
    match cli.command {
        Command::InitConfig => unreachable!(),
        Command::Calibrate { activations } => {
            let summary = cmd_calibrate(&cfg, &out, activations.as_deref())?;
            println!(
                "calibrated {} layers x {} rows -> {}, {}",
                summary.n_layers,
                summary.n_rows,
                summary.activations_path.display(),
                summary.weights_path.display()
            );
        }
        Command::Train { method } => {
            let method: Method = method.into();
            let summary = cmd_train(&cfg, &out, method)?;
            println!(
                "trained {} cells ({}) -> {}, {}",
                summary.n_cells,
                summary.method,
                summary.basis_path.display(),
                summary.surface_path.display()
            );
        }
        Command::Allocate {
            surface,
            policy,
            epsilon,
            r_k,
            r_v,
        } => {
            let policy: PolicyKind = policy.map_or(cfg.policy.kind, Into::into);
            let epsilon = epsilon.unwrap_or(cfg.policy.epsilon);
            // Negated form on purpose: NaN must fail too.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(epsilon > 0.0) {
                return Err(Error::Usage(format!(
                    "epsilon must be positive, got {epsilon}"
                )));
            }
            let surface = surface.unwrap_or_else(|| out.surface(Method::Stief));
            let uniform_ranks = match (r_k, r_v) {
                (Some(k), Some(v)) => Some((k, v)),
                (None, None) => None,
                _ => {
                    return Err(Error::Usage(
                        "--r-k and --r-v must be given together".into(),
                    ))
                }
            };
            let file = cmd_allocate(&cfg, &out, &surface, policy, epsilon, uniform_ranks)?;
            println!(
                "allocated {} layers under {} (epsilon {epsilon}): aggregate KV ratio {:.6} -> {}",
                file.allocation.choices.len(),
                file.allocation.policy,
                file.allocation.aggregate_ratio,
                out.allocation().display()
            );
            for c in &file.allocation.choices {
                println!(
                    "  layer {}: r_k {}, r_v {}, delta {:.6}, ratio {:.6}{}",
                    c.layer,
                    c.r_k,
                    c.r_v,
                    c.delta,
                    c.ratio,
                    if c.fallback { " (fallback)" } else { "" }
                );
            }
        }
        Command::Eval { basis, allocation } => {
            let basis = basis.unwrap_or_else(|| out.basis(Method::Stief));
            let allocation = allocation.unwrap_or_else(|| out.allocation());
            let summary = cmd_eval(&cfg, &out, &basis, &allocation)?;
            println!(
                "aggregate delta {:.6}, aggregate KV ratio {:.6} -> {}",
                summary.aggregate_delta,
                summary.aggregate_ratio,
                out.metrics().display()
            );
        }
        Command::Diagnose { bases, r_k, r_v } => {
            let r_k = match r_k {
                Some(r) => r,
                None => cfg.middle_rank()?,
            };
            let r_v = match r_v {
                Some(r) => r,
                None => cfg.middle_rank()?,
            };
            let rows = cmd_diagnose(&cfg, &out, &bases, r_k, r_v)?;
            println!(
                "compared {} methods at (r_k, r_v) = ({r_k}, {r_v}) -> {}",
                rows.len() / cfg.decoder.n_layers.max(1),
                out.diagnostics_csv().display()
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
