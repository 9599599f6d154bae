use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("rank-deficient matrix in {op}: |r[{index},{index}]| = {pivot:e} below threshold {threshold:e}")]
    RankDeficient {
        op: &'static str,
        index: usize,
        pivot: f64,
        threshold: f64,
    },

    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: usize, detail: String },

    #[error("allocation error: {0}")]
    Allocation(String),

    #[error("diagnostics error: {0}")]
    Diagnostics(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: usize,
        detail: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("stale artifact {path}: {detail}")]
    StaleArtifact { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DegenerateInput {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    /// Prepend a location note (e.g. the failing layer index) to the
    /// message-bearing field while keeping the variant intact.
    pub fn with_context(self, ctx: &str) -> Self {
        let tag = |detail: String| format!("{ctx}: {detail}");
        match self {
            Error::Dimension { op, detail } => Error::Dimension {
                op,
                detail: tag(detail),
            },
            Error::DegenerateInput { op, detail } => Error::DegenerateInput {
                op,
                detail: tag(detail),
            },
            Error::Numeric { op, detail } => Error::Numeric {
                op,
                detail: tag(detail),
            },
            Error::Contract { op, detail } => Error::Contract {
                op,
                detail: tag(detail),
            },
            Error::Config(msg) => Error::Config(tag(msg)),
            Error::TrainingDiverged { step, detail } => Error::TrainingDiverged {
                step,
                detail: tag(detail),
            },
            Error::Allocation(msg) => Error::Allocation(tag(msg)),
            Error::Diagnostics(msg) => Error::Diagnostics(tag(msg)),
            Error::Usage(msg) => Error::Usage(tag(msg)),
            other => other,
        }
    }

    /// Process exit code for the CLI: usage/config problems exit 2,
    /// everything else exits 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            _ => 1,
        }
    }
}
