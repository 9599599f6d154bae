//! Browser demo: build a toy decoder stack, explore per-layer error
//! surfaces, move the error-budget knob over the allocation policies, and
//! train learned bases live — all compiled to WebAssembly from the same
//! core the CLI uses.
//!
//! Everything wasm-specific stays in the thin [`Demo`] wrapper; the state
//! and rendering logic below it is plain Rust and unit-tested on the host.

use subkv::baselines::{build_store, BaselineKind};
use subkv::decoder::{capture_calibration, init_stack, ActivationRecord, DecoderConfig, DecoderStack};
use subkv::diagnostics::svg::line_chart;
use subkv::error::Result;
use subkv::linalg::{derive_seed, random_gaussian, Matrix, RngState};
use subkv::pipeline::surfaces_from_store;
use subkv::stiefel::{train_key_basis, train_value_bases, TrainConfig};
use subkv::store::{BasisStore, LayerBases, Method};
use subkv::surface::{
    allocate_pareto, allocate_uniform, allocate_weighted_pareto, sensitivity_weights,
    ErrorSurface, PolicyKind, RankAllocation,
};
use wasm_bindgen::prelude::*;

const DEMO_D_H: usize = 8;
const DEMO_HEADS_Q: usize = 4;
const DEMO_HEADS_KV: usize = 2;
const DEMO_SEQUENCES: usize = 8;
const DEMO_SEQ_LEN: usize = 24;

fn demo_config(n_layers: usize) -> DecoderConfig {
    DecoderConfig {
        d_model: DEMO_HEADS_Q * DEMO_D_H,
        n_heads_q: DEMO_HEADS_Q,
        n_heads_kv: DEMO_HEADS_KV,
        d_h: DEMO_D_H,
        d_ff: 48,
        n_layers,
        ..DecoderConfig::default()
    }
}

/// Plain-Rust demo state; the wasm wrapper delegates everything here.
pub struct DemoState {
    stack: DecoderStack,
    records: Vec<Vec<ActivationRecord>>,
    ranks: Vec<usize>,
    entries: Vec<(Method, BasisStore, Vec<ErrorSurface>)>,
    seed: u64,
}

impl DemoState {
    pub fn build(n_layers: usize, seed: u64) -> Result<DemoState> {
        let cfg = demo_config(n_layers.clamp(1, 4));
        let stack = init_stack(&cfg, &mut RngState::new(seed))?;
        let mut rng = RngState::new(derive_seed(seed, &[0x77]));
        let inputs: Vec<Matrix> = (0..DEMO_SEQUENCES)
            .map(|_| random_gaussian(DEMO_SEQ_LEN, cfg.d_model, &mut rng))
            .collect();
        let records = capture_calibration(&stack, &inputs)?;
        let ranks = vec![DEMO_D_H / 2, 3 * DEMO_D_H / 4, DEMO_D_H];
        let w_o: Vec<&Matrix> = stack.layers.iter().map(|l| &l.w_o).collect();
        let mut entries = Vec::new();
        for kind in [BaselineKind::KSvd, BaselineKind::Eigen] {
            let store = build_store(kind, &cfg, &w_o, &records, &ranks, &ranks)?;
            let surfaces = surfaces_from_store(&stack, &records, &store)?;
            entries.push((kind.method(), store, surfaces));
        }
        Ok(DemoState {
            stack,
            records,
            ranks,
            entries,
            seed,
        })
    }

    pub fn methods(&self) -> Vec<String> {
        self.entries.iter().map(|(m, _, _)| m.to_string()).collect()
    }

    fn entry(&self, method: &str) -> Result<&(Method, BasisStore, Vec<ErrorSurface>)> {
        self.entries
            .iter()
            .find(|(m, _, _)| m.to_string() == method)
            .ok_or_else(|| {
                subkv::Error::Usage(format!(
                    "method '{method}' not computed yet (have: {})",
                    self.methods().join(", ")
                ))
            })
    }

    /// One heatmap panel per layer, error colored from white to red.
    pub fn surface_svg(&self, method: &str) -> Result<String> {
        let (_, _, surfaces) = self.entry(method)?;
        Ok(surface_heatmaps(method, surfaces))
    }

    pub fn allocate(&self, method: &str, policy: &str, epsilon: f64) -> Result<RankAllocation> {
        let (_, _, surfaces) = self.entry(method)?;
        let policy: PolicyKind = policy.parse()?;
        match policy {
            PolicyKind::Uniform => {
                let mid = self.ranks[(self.ranks.len() - 1) / 2];
                allocate_uniform(surfaces, mid, mid, DEMO_D_H)
            }
            PolicyKind::Pareto => allocate_pareto(surfaces, epsilon, DEMO_D_H),
            PolicyKind::WeightedPareto => {
                let weights = sensitivity_weights(surfaces.len());
                allocate_weighted_pareto(surfaces, epsilon, &weights, DEMO_D_H)
            }
        }
    }

    pub fn allocation_svg(&self, method: &str, policy: &str, epsilon: f64) -> Result<String> {
        let allocation = self.allocate(method, policy, epsilon)?;
        Ok(allocation_bars(&allocation, DEMO_D_H))
    }

    pub fn allocation_json(&self, method: &str, policy: &str, epsilon: f64) -> Result<String> {
        let allocation = self.allocate(method, policy, epsilon)?;
        Ok(serde_json::to_string_pretty(&allocation).expect("allocation serializes"))
    }

    /// Trains learned bases at every candidate rank and registers them as a
    /// selectable method; returns the per-layer loss curves at the middle
    /// rank.
    pub fn train_learned(&mut self, max_epochs: usize) -> Result<String> {
        let max_epochs = max_epochs.clamp(1, 30);
        let cfg = TrainConfig {
            max_epochs,
            patience: 3.min(max_epochs),
            ..TrainConfig::default()
        };
        let dec = &self.stack.config;
        let mid = self.ranks[(self.ranks.len() - 1) / 2];
        let mut layers = Vec::with_capacity(self.stack.layers.len());
        let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for (l, layer) in self.stack.layers.iter().enumerate() {
            let mut key = Vec::new();
            let mut key_logs = Vec::new();
            let mut value = Vec::new();
            let mut value_logs = Vec::new();
            for &r in &self.ranks {
                let mut rng =
                    RngState::new(derive_seed(self.seed, &[l as u64, 0, r as u64]));
                let (basis, log) =
                    train_key_basis(dec, layer, &self.records[l], r, &cfg, &mut rng)?;
                if r == mid {
                    curves.push((
                        format!("layer {l} keys"),
                        log.entries
                            .iter()
                            .map(|e| (e.epoch as f64, e.loss))
                            .collect(),
                    ));
                }
                key.push(basis);
                key_logs.push(log);
            }
            for &r in &self.ranks {
                let mut rng =
                    RngState::new(derive_seed(self.seed, &[l as u64, 1, r as u64]));
                let (bases, log) =
                    train_value_bases(dec, layer, &self.records[l], r, &cfg, &mut rng)?;
                if r == mid {
                    curves.push((
                        format!("layer {l} values"),
                        log.entries
                            .iter()
                            .map(|e| (e.epoch as f64, e.loss))
                            .collect(),
                    ));
                }
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
        let store = BasisStore {
            method: Method::Stief,
            d_h: dec.d_h,
            n_heads_kv: dec.n_heads_kv,
            ranks_k: self.ranks.clone(),
            ranks_v: self.ranks.clone(),
            layers,
        };
        let surfaces = surfaces_from_store(&self.stack, &self.records, &store)?;
        self.entries.retain(|(m, _, _)| *m != Method::Stief);
        self.entries.push((Method::Stief, store, surfaces));
        Ok(line_chart(
            "training loss at the middle rank",
            "epoch",
            "relative layer-output error",
            &curves,
        ))
    }

    /// Side-by-side comparison of one surface cell across methods.
    pub fn delta_table_json(&self) -> String {
        let mut rows = Vec::new();
        for (method, _, surfaces) in &self.entries {
            for s in surfaces {
                for (i, &rk) in s.ranks_k.iter().enumerate() {
                    for (j, &rv) in s.ranks_v.iter().enumerate() {
                        rows.push(serde_json::json!({
                            "method": method.to_string(),
                            "layer": s.layer,
                            "r_k": rk,
                            "r_v": rv,
                            "delta": s.get(i, j),
                        }));
                    }
                }
            }
        }
        serde_json::Value::Array(rows).to_string()
    }
}

fn heat_color(t: f64) -> String {
    // White (t = 0) to deep red (t = 1).
    let t = t.clamp(0.0, 1.0);
    let r = 255;
    let g = (255.0 * (1.0 - 0.85 * t)) as u8;
    let b = (255.0 * (1.0 - 0.95 * t)) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// L heatmap panels side by side, one per layer, sharing a color scale.
pub fn surface_heatmaps(method: &str, surfaces: &[ErrorSurface]) -> String {
    let cell = 46.0;
    let label = 36.0;
    let panel_gap = 30.0;
    let nk = surfaces.first().map_or(0, |s| s.ranks_k.len());
    let nv = surfaces.first().map_or(0, |s| s.ranks_v.len());
    let panel_w = label + nv as f64 * cell;
    let panel_h = label + nk as f64 * cell + 22.0;
    let width = 10.0 + surfaces.len() as f64 * (panel_w + panel_gap);
    let height = panel_h + 30.0;
    let max_delta = surfaces
        .iter()
        .flat_map(|s| s.delta.iter().flatten())
        .cloned()
        .fold(1e-12, f64::max);

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\" \
         font-family=\"monospace\" font-size=\"11\">\n"
    );
    for (p, s) in surfaces.iter().enumerate() {
        let x0 = 10.0 + p as f64 * (panel_w + panel_gap);
        let y0 = 24.0;
        out.push_str(&format!(
            "  <text x=\"{}\" y=\"14\">{} layer {}</text>\n",
            x0,
            method,
            s.layer
        ));
        for (i, &rk) in s.ranks_k.iter().enumerate() {
            out.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">k{}</text>\n",
                x0 + label - 4.0,
                y0 + label + i as f64 * cell + cell / 2.0 + 4.0,
                rk
            ));
            for (j, &rv) in s.ranks_v.iter().enumerate() {
                let d = s.get(i, j);
                out.push_str(&format!(
                    "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" \
                     fill=\"{}\" stroke=\"#999\"/>\n",
                    x0 + label + j as f64 * cell,
                    y0 + label + i as f64 * cell,
                    heat_color(d / max_delta)
                ));
                out.push_str(&format!(
                    "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>\n",
                    x0 + label + j as f64 * cell + cell / 2.0,
                    y0 + label + i as f64 * cell + cell / 2.0 + 4.0,
                    d
                ));
                if i == 0 {
                    out.push_str(&format!(
                        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">v{}</text>\n",
                        x0 + label + j as f64 * cell + cell / 2.0,
                        y0 + label - 6.0,
                        rv
                    ));
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Per-layer bars of retained key/value rank fractions plus the achieved
/// compression ratio.
pub fn allocation_bars(allocation: &RankAllocation, d_h: usize) -> String {
    let bar_w = 26.0;
    let group_w = 72.0;
    let plot_h = 160.0;
    let base_y = 200.0;
    let width = 60.0 + allocation.choices.len() as f64 * group_w + 40.0;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} 260\" \
         font-family=\"monospace\" font-size=\"11\">\n"
    );
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"16\" text-anchor=\"middle\">per-layer retained rank fraction \
         (policy {}, aggregate KV ratio {:.3})</text>\n",
        width / 2.0,
        allocation.policy,
        allocation.aggregate_ratio
    ));
    out.push_str(&format!(
        "  <line x1=\"40\" y1=\"{base_y}\" x2=\"{}\" y2=\"{base_y}\" stroke=\"black\"/>\n",
        width - 20.0
    ));
    for c in &allocation.choices {
        let x0 = 50.0 + c.layer as f64 * group_w;
        let hk = plot_h * c.r_k as f64 / d_h as f64;
        let hv = plot_h * c.r_v as f64 / d_h as f64;
        out.push_str(&format!(
            "  <rect x=\"{x0}\" y=\"{:.1}\" width=\"{bar_w}\" height=\"{hk:.1}\" fill=\"#1f77b4\"/>\n",
            base_y - hk
        ));
        out.push_str(&format!(
            "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar_w}\" height=\"{hv:.1}\" fill=\"#d62728\"/>\n",
            x0 + bar_w + 4.0,
            base_y - hv
        ));
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">L{}{}</text>\n",
            x0 + bar_w + 2.0,
            base_y + 16.0,
            c.layer,
            if c.fallback { "*" } else { "" }
        ));
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{:.2}</text>\n",
            x0 + bar_w + 2.0,
            base_y + 30.0,
            c.ratio
        ));
    }
    out.push_str(
        "  <rect x=\"44\" y=\"28\" width=\"10\" height=\"10\" fill=\"#1f77b4\"/>\n  <text x=\"58\" y=\"37\">keys</text>\n",
    );
    out.push_str(
        "  <rect x=\"104\" y=\"28\" width=\"10\" height=\"10\" fill=\"#d62728\"/>\n  <text x=\"118\" y=\"37\">values</text>\n",
    );
    out.push_str("</svg>\n");
    out
}

/// WebAssembly-facing wrapper around [`DemoState`].
#[wasm_bindgen]
pub struct Demo {
    state: DemoState,
}

fn to_js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
impl Demo {
    /// Builds the toy stack, calibrates it, and computes the closed-form
    /// baseline surfaces.
    #[wasm_bindgen(constructor)]
    pub fn new(n_layers: usize, seed: u64) -> std::result::Result<Demo, JsError> {
        Ok(Demo {
            state: to_js(DemoState::build(n_layers, seed))?,
        })
    }

    /// JSON array of method names that currently have surfaces.
    pub fn methods(&self) -> String {
        serde_json::to_string(&self.state.methods()).expect("serializes")
    }

    /// Per-layer error-surface heatmaps for one method.
    pub fn surface_svg(&self, method: &str) -> std::result::Result<String, JsError> {
        to_js(self.state.surface_svg(method))
    }

    /// Rank-allocation bar chart for a method, policy, and error budget.
    pub fn allocation_svg(
        &self,
        method: &str,
        policy: &str,
        epsilon: f64,
    ) -> std::result::Result<String, JsError> {
        to_js(self.state.allocation_svg(method, policy, epsilon))
    }

    /// The same allocation as JSON, for the detail table.
    pub fn allocation_json(
        &self,
        method: &str,
        policy: &str,
        epsilon: f64,
    ) -> std::result::Result<String, JsError> {
        to_js(self.state.allocation_json(method, policy, epsilon))
    }

    /// Trains learned bases in the browser and returns the loss-curve SVG;
    /// afterwards "stief" is available as a method.
    pub fn train_learned(&mut self, max_epochs: usize) -> std::result::Result<String, JsError> {
        to_js(self.state.train_learned(max_epochs))
    }

    /// Every surface cell of every method as a JSON array.
    pub fn delta_table_json(&self) -> String {
        self.state.delta_table_json()
    }
}
