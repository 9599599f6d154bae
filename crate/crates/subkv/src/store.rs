//! Basis container shared by the learned and closed-form methods: per layer
//! and candidate rank, one shared key basis plus per-KV-head value bases,
//! with provenance and training logs.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};

/// Provenance of a basis store. String forms are the CLI method names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Stief,
    KSvd,
    Eigen,
    KqSvd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Stief, Method::KSvd, Method::Eigen, Method::KqSvd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Stief => "stief",
            Method::KSvd => "k_svd",
            Method::Eigen => "eigen",
            Method::KqSvd => "kq_svd",
        }
    }

    pub fn tag_byte(self) -> u8 {
        match self {
            Method::Stief => 0,
            Method::KSvd => 1,
            Method::Eigen => 2,
            Method::KqSvd => 3,
        }
    }

    pub fn from_tag_byte(b: u8) -> Result<Method> {
        Ok(match b {
            0 => Method::Stief,
            1 => Method::KSvd,
            2 => Method::Eigen,
            3 => Method::KqSvd,
            other => {
                return Err(Error::Format {
                    path: "<basis>".into(),
                    offset: 0,
                    detail: format!("unknown provenance tag {other}"),
                })
            }
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Ok(match s {
            "stief" => Method::Stief,
            "k_svd" => Method::KSvd,
            "eigen" => Method::Eigen,
            "kq_svd" => Method::KqSvd,
            other => return Err(Error::Usage(format!("unknown method '{other}'"))),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One epoch line of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub jitter_events: usize,
}

/// Loss curve plus jitter bookkeeping for one (layer, target, rank) cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<EpochStat>,
}

impl TrainingLog {
    pub fn total_jitter_events(&self) -> usize {
        self.entries.iter().map(|e| e.jitter_events).sum()
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.entries
            .iter()
            .map(|e| e.loss)
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }
}

/// Bases of one layer: `key[i]` is the shared key basis at rank
/// `ranks_k[i]`; `value[j]` holds one basis per KV head at rank `ranks_v[j]`.
#[derive(Debug, Clone)]
pub struct LayerBases {
    pub key: Vec<Matrix>,
    pub value: Vec<Vec<Matrix>>,
    pub key_logs: Vec<TrainingLog>,
    pub value_logs: Vec<TrainingLog>,
}

#[derive(Debug, Clone)]
pub struct BasisStore {
    pub method: Method,
    pub d_h: usize,
    pub n_heads_kv: usize,
    pub ranks_k: Vec<usize>,
    pub ranks_v: Vec<usize>,
    pub layers: Vec<LayerBases>,
}

impl BasisStore {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn rank_index(ranks: &[usize], r: usize, what: &str, method: Method) -> Result<usize> {
        ranks.iter().position(|&x| x == r).ok_or_else(|| {
            Error::Diagnostics(format!(
                "store '{method}' has no {what} rank {r} (trained: {ranks:?})"
            ))
        })
    }

    pub fn key_basis(&self, layer: usize, r: usize) -> Result<&Matrix> {
        let i = Self::rank_index(&self.ranks_k, r, "key", self.method)?;
        Ok(&self.layers[layer].key[i])
    }

    pub fn value_bases(&self, layer: usize, r: usize) -> Result<&[Matrix]> {
        let i = Self::rank_index(&self.ranks_v, r, "value", self.method)?;
        Ok(&self.layers[layer].value[i])
    }

    pub fn has_rank_pair(&self, r_k: usize, r_v: usize) -> bool {
        self.ranks_k.contains(&r_k) && self.ranks_v.contains(&r_v)
    }

    /// Checks `||P^T P - I||_F < tol` for every stored basis.
    pub fn audit_orthonormality(&self, tol: f64) -> Result<()> {
        let check = |basis: &Matrix, what: String| -> Result<()> {
            let r = basis.cols();
            let residual = basis
                .transpose()
                .matmul(basis)?
                .sub(&Matrix::identity(r))?
                .frobenius_norm();
            if residual > tol {
                return Err(Error::contract(
                    "audit_orthonormality",
                    format!("{what}: residual {residual:e} above {tol:e}"),
                ));
            }
            Ok(())
        };
        for (l, layer) in self.layers.iter().enumerate() {
            for (i, basis) in layer.key.iter().enumerate() {
                check(basis, format!("layer {l} key rank {}", self.ranks_k[i]))?;
            }
            for (j, heads) in layer.value.iter().enumerate() {
                for (h, basis) in heads.iter().enumerate() {
                    check(
                        basis,
                        format!("layer {l} value head {h} rank {}", self.ranks_v[j]),
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Training log lines in the documented CSV column order:
    /// layer,target,rank,epoch,loss,lr,jitter_events.
    pub fn training_log_csv(&self) -> String {
        let mut out = String::from("layer,target,rank,epoch,loss,lr,jitter_events\n");
        for (l, layer) in self.layers.iter().enumerate() {
            for (i, log) in layer.key_logs.iter().enumerate() {
                for e in &log.entries {
                    out.push_str(&format!(
                        "{l},key,{},{},{},{},{}\n",
                        self.ranks_k[i], e.epoch, e.loss, e.lr, e.jitter_events
                    ));
                }
            }
            for (j, log) in layer.value_logs.iter().enumerate() {
                for e in &log.entries {
                    out.push_str(&format!(
                        "{l},value,{},{},{},{},{}\n",
                        self.ranks_v[j], e.epoch, e.loss, e.lr, e.jitter_events
                    ));
                }
            }
        }
        out
    }
}
