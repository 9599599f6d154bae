//! Post-training KV-cache low-rank compression at desk scale: learned
//! orthonormal projection bases trained against decoder-layer output error,
//! the SVD-style baselines they are compared to, per-layer error surfaces,
//! and deployment-time rank-allocation policies.

// Index-style loops are the house idiom for dense matrix kernels, and the
// negated float comparisons reject NaN on purpose.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::type_complexity)]
#![allow(clippy::manual_is_multiple_of)]

pub mod autodiff;
pub mod baselines;
pub mod decoder;
pub mod diagnostics;
pub mod config;
pub mod error;
pub mod formats;
pub mod linalg;
pub mod pipeline;
pub mod stiefel;
pub mod store;
pub mod surface;

pub use error::{Error, Result};
