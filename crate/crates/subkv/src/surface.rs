//! Error-surface storage and deployment-time rank-allocation policies.
//!
//! Surfaces are built once per layer over candidate rank pairs; allocation
//! is a pure lookup afterwards, so the accuracy-memory knob moves without
//! retraining any basis.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Corner tolerance: a surface containing the full rank in both candidate
/// sets must be exact there.
pub const FULL_RANK_CORNER_TOL: f64 = 1e-8;

/// Grid of relative layer-output errors over candidate rank pairs,
/// `delta[i][j]` for key rank `ranks_k[i]` and value rank `ranks_v[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSurface {
    pub layer: usize,
    pub ranks_k: Vec<usize>,
    pub ranks_v: Vec<usize>,
    pub delta: Vec<Vec<f64>>,
}

impl ErrorSurface {
    pub fn new(
        layer: usize,
        ranks_k: Vec<usize>,
        ranks_v: Vec<usize>,
        delta: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let s = ErrorSurface {
            layer,
            ranks_k,
            ranks_v,
            delta,
        };
        s.validate(None)?;
        Ok(s)
    }

    pub fn validate(&self, d_h: Option<usize>) -> Result<()> {
        if self.ranks_k.is_empty() || self.ranks_v.is_empty() {
            return Err(Error::Allocation(format!(
                "layer {}: empty candidate rank set",
                self.layer
            )));
        }
        if !self.ranks_k.windows(2).all(|w| w[0] < w[1])
            || !self.ranks_v.windows(2).all(|w| w[0] < w[1])
        {
            return Err(Error::Allocation(format!(
                "layer {}: candidate ranks must be sorted ascending and distinct",
                self.layer
            )));
        }
        if self.delta.len() != self.ranks_k.len()
            || self.delta.iter().any(|row| row.len() != self.ranks_v.len())
        {
            return Err(Error::Allocation(format!(
                "layer {}: grid shape does not match candidate sets",
                self.layer
            )));
        }
        for row in &self.delta {
            for &d in row {
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::Allocation(format!(
                        "layer {}: delta {d} is not a finite nonnegative error",
                        self.layer
                    )));
                }
            }
        }
        if let Some(d_h) = d_h {
            if let (Some(i), Some(j)) = (
                self.ranks_k.iter().position(|&r| r == d_h),
                self.ranks_v.iter().position(|&r| r == d_h),
            ) {
                let corner = self.delta[i][j];
                if corner >= FULL_RANK_CORNER_TOL {
                    return Err(Error::Allocation(format!(
                        "layer {}: full-rank corner error {corner:e} not below {FULL_RANK_CORNER_TOL:e}",
                        self.layer
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, key_index: usize, value_index: usize) -> f64 {
        self.delta[key_index][value_index]
    }
}

/// Fraction of the original per-token KV memory retained.
pub fn compression_ratio(r_k: usize, r_v: usize, d_h: usize) -> Result<f64> {
    if r_k == 0 || r_v == 0 || r_k > d_h || r_v > d_h {
        return Err(Error::dimension(
            "compression_ratio",
            format!("ranks ({r_k}, {r_v}) outside [1, {d_h}]"),
        ));
    }
    Ok((r_k + r_v) as f64 / (2 * d_h) as f64)
}

/// Indices of the points not dominated in (error, total rank): kept when no
/// other point is lower-or-equal in both coordinates and strictly lower in
/// at least one. Ties are retained; input order is preserved.
pub fn pareto_front_indices(points: &[(f64, usize)]) -> Vec<usize> {
    let n = points.len();
    // Sort by total rank, then error, then original index; one sweep tracks
    // the best error at strictly smaller ranks and the minimum within each
    // equal-rank group.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .1
            .cmp(&points[b].1)
            .then(points[a].0.partial_cmp(&points[b].0).unwrap())
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut best_prev = f64::INFINITY;
    let mut i = 0;
    while i < n {
        let rank = points[order[i]].1;
        let mut j = i;
        while j < n && points[order[j]].1 == rank {
            j += 1;
        }
        let group_min = points[order[i]].0;
        for &idx in &order[i..j] {
            let d = points[idx].0;
            if d == group_min && d < best_prev {
                kept.push(idx);
            }
        }
        best_prev = best_prev.min(group_min);
        i = j;
    }
    kept.sort_unstable();
    kept
}

/// The Pareto-optimal subset itself, in input order.
pub fn pareto_front(points: &[(f64, usize)]) -> Vec<(f64, usize)> {
    pareto_front_indices(points)
        .into_iter()
        .map(|i| points[i])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Uniform,
    Pareto,
    WeightedPareto,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<PolicyKind> {
        Ok(match s {
            "uniform" => PolicyKind::Uniform,
            "pareto" => PolicyKind::Pareto,
            "weighted_pareto" => PolicyKind::WeightedPareto,
            other => return Err(Error::Usage(format!("unknown policy '{other}'"))),
        })
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyKind::Uniform => "uniform",
            PolicyKind::Pareto => "pareto",
            PolicyKind::WeightedPareto => "weighted_pareto",
        })
    }
}

/// Chosen rank pair for one layer. `fallback` marks layers where no Pareto
/// point met the budget and the minimum-error point was taken instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub layer: usize,
    pub r_k: usize,
    pub r_v: usize,
    pub delta: f64,
    pub ratio: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAllocation {
    pub policy: PolicyKind,
    pub epsilon: Option<f64>,
    pub d_h: usize,
    pub choices: Vec<LayerChoice>,
    pub aggregate_ratio: f64,
}

/// Mean over layers of the per-layer compression ratio.
pub fn aggregate_ratio(choices: &[LayerChoice]) -> f64 {
    if choices.is_empty() {
        return 0.0;
    }
    choices.iter().map(|c| c.ratio).sum::<f64>() / choices.len() as f64
}

/// Fixed ranks for all layers.
pub fn allocate_uniform(
    surfaces: &[ErrorSurface],
    r_k: usize,
    r_v: usize,
    d_h: usize,
) -> Result<RankAllocation> {
    if surfaces.is_empty() {
        return Err(Error::Allocation("no surfaces".into()));
    }
    let mut choices = Vec::with_capacity(surfaces.len());
    for s in surfaces {
        let i = s.ranks_k.iter().position(|&r| r == r_k).ok_or_else(|| {
            Error::Allocation(format!(
                "layer {}: key rank {r_k} not in the trained candidate set {:?}",
                s.layer, s.ranks_k
            ))
        })?;
        let j = s.ranks_v.iter().position(|&r| r == r_v).ok_or_else(|| {
            Error::Allocation(format!(
                "layer {}: value rank {r_v} not in the trained candidate set {:?}",
                s.layer, s.ranks_v
            ))
        })?;
        choices.push(LayerChoice {
            layer: s.layer,
            r_k,
            r_v,
            delta: s.get(i, j),
            ratio: compression_ratio(r_k, r_v, d_h)?,
            fallback: false,
        });
    }
    let aggregate = aggregate_ratio(&choices);
    Ok(RankAllocation {
        policy: PolicyKind::Uniform,
        epsilon: None,
        d_h,
        choices,
        aggregate_ratio: aggregate,
    })
}

fn allocate_layer(s: &ErrorSurface, epsilon: f64, d_h: usize) -> Result<LayerChoice> {
    // Grid cells in fixed iteration order (key-major), flattened to points.
    let mut cells = Vec::with_capacity(s.ranks_k.len() * s.ranks_v.len());
    for (i, &rk) in s.ranks_k.iter().enumerate() {
        for (j, &rv) in s.ranks_v.iter().enumerate() {
            cells.push((s.get(i, j), rk, rv));
        }
    }
    let points: Vec<(f64, usize)> = cells.iter().map(|&(d, rk, rv)| (d, rk + rv)).collect();
    let pareto: Vec<&(f64, usize, usize)> = pareto_front_indices(&points)
        .into_iter()
        .map(|i| &cells[i])
        .collect();

    // Among Pareto points within budget: minimum total rank, then smaller
    // r_v, then smaller r_k. Without a feasible point: minimum error, same
    // tie-breaks, flagged as fallback.
    let pick = |candidates: &[&(f64, usize, usize)]| -> (f64, usize, usize) {
        *candidates
            .iter()
            .min_by(|a, b| {
                (a.1 + a.2)
                    .cmp(&(b.1 + b.2))
                    .then(a.2.cmp(&b.2))
                    .then(a.1.cmp(&b.1))
            })
            .expect("non-empty candidate set")
            .to_owned()
    };
    let feasible: Vec<&(f64, usize, usize)> = pareto
        .iter()
        .filter(|&&&(d, _, _)| d <= epsilon)
        .copied()
        .collect();
    let (fallback, (delta, r_k, r_v)) = if feasible.is_empty() {
        let min_err = pareto
            .iter()
            .map(|&&(d, _, _)| d)
            .fold(f64::INFINITY, f64::min);
        let at_min: Vec<&(f64, usize, usize)> = pareto
            .iter()
            .filter(|&&&(d, _, _)| d == min_err)
            .copied()
            .collect();
        (true, pick(&at_min))
    } else {
        (false, pick(&feasible))
    };
    Ok(LayerChoice {
        layer: s.layer,
        r_k,
        r_v,
        delta,
        ratio: compression_ratio(r_k, r_v, d_h)?,
        fallback,
    })
}

/// Per layer: restrict to the Pareto set of (error, total rank), then take
/// the cheapest point meeting the budget.
pub fn allocate_pareto(
    surfaces: &[ErrorSurface],
    epsilon: f64,
    d_h: usize,
) -> Result<RankAllocation> {
    if surfaces.is_empty() {
        return Err(Error::Allocation("no surfaces".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Usage(format!("epsilon must be positive, got {epsilon}")));
    }
    let choices: Vec<LayerChoice> = surfaces
        .iter()
        .map(|s| allocate_layer(s, epsilon, d_h))
        .collect::<Result<_>>()?;
    let aggregate = aggregate_ratio(&choices);
    Ok(RankAllocation {
        policy: PolicyKind::Pareto,
        epsilon: Some(epsilon),
        d_h,
        choices,
        aggregate_ratio: aggregate,
    })
}

/// Positional sensitivity prior: a linear ramp 2.0, 1.75, 1.5, 1.25 on the
/// first and last four layers (truncated symmetrically for short stacks),
/// ones elsewhere, normalized to mean one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityWeights(pub Vec<f64>);

pub fn sensitivity_weights(n_layers: usize) -> SensitivityWeights {
    const RAMP: [f64; 4] = [2.0, 1.75, 1.5, 1.25];
    let per_end = (n_layers / 2).min(RAMP.len());
    let mut raw = vec![1.0; n_layers];
    for i in 0..per_end {
        raw[i] = RAMP[i];
        raw[n_layers - 1 - i] = RAMP[i];
    }
    let mean = raw.iter().sum::<f64>() / n_layers as f64;
    for v in &mut raw {
        *v /= mean;
    }
    SensitivityWeights(raw)
}

/// Pareto allocation with a per-layer budget `epsilon / w[layer]`.
pub fn allocate_weighted_pareto(
    surfaces: &[ErrorSurface],
    epsilon: f64,
    weights: &SensitivityWeights,
    d_h: usize,
) -> Result<RankAllocation> {
    if surfaces.is_empty() {
        return Err(Error::Allocation("no surfaces".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Usage(format!("epsilon must be positive, got {epsilon}")));
    }
    if weights.0.len() != surfaces.len() {
        return Err(Error::Allocation(format!(
            "{} weights for {} layers",
            weights.0.len(),
            surfaces.len()
        )));
    }
    let choices: Vec<LayerChoice> = surfaces
        .iter()
        .zip(&weights.0)
        .map(|(s, &w)| allocate_layer(s, epsilon / w, d_h))
        .collect::<Result<_>>()?;
    let aggregate = aggregate_ratio(&choices);
    Ok(RankAllocation {
        policy: PolicyKind::WeightedPareto,
        epsilon: Some(epsilon),
        d_h,
        choices,
        aggregate_ratio: aggregate,
    })
}
