//! Run configuration: decoder shape, training hyperparameters, candidate
//! ranks, calibration settings, allocation policy, and output paths. Every
//! field has a default and the JSON form round-trips losslessly.

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::stiefel::TrainConfig;
use crate::surface::PolicyKind;
use serde::{Deserialize, Serialize};

/// Error-budget presets documented for sweeps.
pub const EPSILON_PRESETS: [f64; 5] = [0.015, 0.03, 0.045, 0.06, 0.09];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankConfig {
    /// Candidate down-projection ranks as fractions of d_h, rounded to the
    /// nearest integer and deduplicated.
    pub fractions: Vec<f64>,
    /// Append d_h itself so allocation always has an exact fallback point.
    pub include_full_rank: bool,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            fractions: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            include_full_rank: true,
        }
    }
}

impl RankConfig {
    pub fn candidate_ranks(&self, d_h: usize) -> Result<Vec<usize>> {
        if self.fractions.is_empty() {
            return Err(Error::Config("rank fractions must be non-empty".into()));
        }
        let mut ranks: Vec<usize> = Vec::new();
        for &f in &self.fractions {
            if !(f.is_finite() && f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "rank fraction {f} outside (0, 1]"
                )));
            }
            let r = ((f * d_h as f64).round() as usize).clamp(1, d_h);
            if !ranks.contains(&r) {
                ranks.push(r);
            }
        }
        if self.include_full_rank && !ranks.contains(&d_h) {
            ranks.push(d_h);
        }
        ranks.sort_unstable();
        Ok(ranks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            n_sequences: 32,
            seq_len: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub epsilon: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::WeightedPareto,
            epsilon: 0.045,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub out_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub ranks: RankConfig,
    pub calibration: CalibrationConfig,
    pub policy: PolicyConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.train.validate()?;
        self.ranks.candidate_ranks(self.decoder.d_h)?;
        if self.calibration.n_sequences == 0 || self.calibration.seq_len == 0 {
            return Err(Error::Config(
                "calibration needs at least one sequence and token".into(),
            ));
        }
        if !(self.policy.epsilon > 0.0) {
            return Err(Error::Config("policy epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn candidate_ranks(&self) -> Result<Vec<usize>> {
        self.ranks.candidate_ranks(self.decoder.d_h)
    }

    /// Middle candidate rank (lower median for even counts, full rank
    /// excluded when other candidates exist).
    pub fn middle_rank(&self) -> Result<usize> {
        let ranks = self.candidate_ranks()?;
        let trained: Vec<usize> = if ranks.len() > 1 && self.ranks.include_full_rank {
            ranks
                .iter()
                .copied()
                .filter(|&r| r != self.decoder.d_h)
                .collect()
        } else {
            ranks.clone()
        };
        let pool = if trained.is_empty() { &ranks } else { &trained };
        Ok(pool[(pool.len() - 1) / 2])
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Format {
            path: path.to_string(),
            offset: e.column(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the numerics-relevant sections (decoder, train, ranks,
    /// calibration), embedded in artifacts so stale mixtures of files are
    /// rejected. Output paths and the allocation policy do not affect the
    /// recorded data, so changing them keeps existing artifacts valid.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Fingerprinted<'a> {
            decoder: &'a DecoderConfig,
            train: &'a TrainConfig,
            ranks: &'a RankConfig,
            calibration: &'a CalibrationConfig,
        }
        let doc = serde_json::to_string(&Fingerprinted {
            decoder: &self.decoder,
            train: &self.train,
            ranks: &self.ranks,
            calibration: &self.calibration,
        })
        .expect("config serializes");
        format!("{:016x}", fnv1a64(doc.as_bytes()))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
