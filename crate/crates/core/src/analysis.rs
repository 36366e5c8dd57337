//! Exact parameter and multiply-accumulate accounting.
//!
//! MAC convention: convolutions count `k²·C_in·C_out·H·W` (depthwise
//! `k²·C·H·W`); attention counts the matrix products it performs. LayerNorm,
//! softmax, GELU, L2 normalization and elementwise products/sums are not
//! counted. FLOPs are reported as 2 × MACs.

use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::head_dim_or_zero;
use crate::ffn;
use crate::network::{padded_size, BlockGeometry, BlockMode, HeadSchedule, ModelConfig, SkipMode};
use crate::partition::effective_size;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub input: (usize, usize),
    pub padded: (usize, usize),
    pub fused: bool,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_flops: u64,
    /// Full spatial self-attention over the padded input at the top-level
    /// width; not part of the totals.
    pub dense_reference: CostRow,
}

pub fn pointwise_params(c_in: usize, c_out: usize) -> u64 {
    (c_in * c_out + c_out) as u64
}

pub fn pointwise_macs(c_in: usize, c_out: usize, h: usize, w: usize) -> u64 {
    (c_in * c_out * h * w) as u64
}

pub fn dense_params(c_in: usize, c_out: usize, k: usize) -> u64 {
    (k * k * c_in * c_out + c_out) as u64
}

pub fn dense_macs(c_in: usize, c_out: usize, k: usize, h: usize, w: usize) -> u64 {
    (k * k * c_in * c_out * h * w) as u64
}

pub fn depthwise_params(c: usize, k: usize) -> u64 {
    (k * k * c + c) as u64
}

pub fn depthwise_macs(c: usize, k: usize, h: usize, w: usize) -> u64 {
    (k * k * c * h * w) as u64
}

/// Both FCSA branches: per window and head, `Q̂·K̂ᵀ` (d·d·p²) and `A·V`
/// (d·d·p²). Uses the window actually applied on an h×w map.
pub fn fcsa_attention_macs(c: usize, heads: usize, h: usize, w: usize, window: usize) -> u64 {
    let p = effective_size(window, h, w);
    let d = head_dim_or_zero(c, heads);
    let windows = (h / p) * (w / p);
    let per_head = 2 * d * d * p * p;
    (2 * windows * heads * per_head) as u64
}

/// Per group and head, `Q·Kᵀ` (g²·g²·d) and `A·V` (g²·g²·d).
pub fn ggsa_attention_macs(c: usize, heads: usize, h: usize, w: usize, grid: usize) -> u64 {
    let g = effective_size(grid, h, w);
    let d = head_dim_or_zero(c, heads);
    let groups = (h / g) * (w / g);
    let t = g * g;
    (groups * heads * 2 * t * t * d) as u64
}

/// Full spatial attention: `(HW)²·C` for `Q·Kᵀ` plus the same for `A·V`.
pub fn dense_attention_macs(c: usize, h: usize, w: usize) -> u64 {
    let n = (h * w) as u64;
    2 * n * n * c as u64
}

struct Acc {
    rows: Vec<CostRow>,
}

impl Acc {
    fn push(&mut self, name: String, params: u64, macs: u64) {
        self.rows.push(CostRow { name, params, macs });
    }

    fn pw(&mut self, name: String, c_in: usize, c_out: usize, h: usize, w: usize) {
        self.push(name, pointwise_params(c_in, c_out), pointwise_macs(c_in, c_out, h, w));
    }

    fn dw(&mut self, name: String, c: usize, k: usize, h: usize, w: usize) {
        self.push(name, depthwise_params(c, k), depthwise_macs(c, k, h, w));
    }

    fn ln(&mut self, name: String, c: usize) {
        self.push(name, 2 * c as u64, 0);
    }

    fn ffn(&mut self, p: &str, c: usize, m: usize, h: usize, w: usize, fused: bool) {
        if fused {
            self.pw(format!("{p}.leffn.pw1"), c, m, h, w);
            self.dw(format!("{p}.leffn.dw"), m, ffn::FUSED_KERNEL, h, w);
            self.pw(format!("{p}.leffn.pw2"), m, c, h, w);
        } else {
            self.pw(format!("{p}.rep.pw1a"), c, m, h, w);
            self.pw(format!("{p}.rep.pw1b"), m, m, h, w);
            for k in [5, 3, 1] {
                self.dw(format!("{p}.rep.dw{k}"), m, k, h, w);
            }
            self.pw(format!("{p}.rep.pw2a"), m, m, h, w);
            self.pw(format!("{p}.rep.pw2b"), m, c, h, w);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn fgtb(&mut self, p: &str, c: usize, m: usize, geom: BlockGeometry, alphas: usize, h: usize, w: usize, fused: bool) {
        let heads = geom.heads;
        let maps = (3 * heads * geom.window * geom.window + alphas) as u64;
        self.ln(format!("{p}.norm1"), c);
        self.pw(format!("{p}.fcsa.qkv_pw"), c, 3 * c, h, w);
        self.dw(format!("{p}.fcsa.qkv_dw"), 3 * c, 3, h, w);
        self.push(
            format!("{p}.fcsa.attn"),
            maps,
            fcsa_attention_macs(c, heads, h, w, geom.window),
        );
        self.pw(format!("{p}.fcsa.out_pw"), c, c, h, w);
        self.ln(format!("{p}.norm2"), c);
        self.ffn(&format!("{p}.ffn1"), c, m, h, w, fused);
        self.ln(format!("{p}.norm3"), c);
        self.pw(format!("{p}.ggsa.qkv_pw"), c, 3 * c, h, w);
        let span = 2 * geom.grid - 1;
        self.push(
            format!("{p}.ggsa.attn"),
            (heads * span * span) as u64,
            ggsa_attention_macs(c, heads, h, w, geom.grid),
        );
        self.pw(format!("{p}.ggsa.out_pw"), c, c, h, w);
        self.ln(format!("{p}.norm4"), c);
        self.ffn(&format!("{p}.ffn2"), c, m, h, w, fused);
    }
}

/// Per-layer costs for an `height×width` input (padded internally).
pub fn cost_report(cfg: &ModelConfig, height: usize, width: usize, fused: bool) -> CostReport {
    let (ph, pw) = padded_size(height, width, cfg);
    let ic = cfg.image_channels;
    let c0 = cfg.base_channels;
    let sb = cfg.stage_blocks();
    let res = |l: usize| (ph >> l, pw >> l);
    let mut a = Acc { rows: Vec::new() };
    a.push("stem".into(), dense_params(ic, c0, 3), dense_macs(ic, c0, 3, ph, pw));

    let block = |a: &mut Acc, name: String, l: usize| {
        let (h, w) = res(l);
        let heads = cfg.heads.at(l);
        let geom = BlockGeometry {
            heads,
            window: cfg.window,
            grid: cfg.grid,
        };
        let alphas = cfg.alpha.count(heads);
        a.fgtb(&name, cfg.channels(l), cfg.hidden(l), geom, alphas, h, w, fused);
    };

    for l in 0..3 {
        for i in 0..sb.encoder[l] {
            block(&mut a, format!("enc{l}.block{i}"), l);
        }
        let c = cfg.channels(l);
        let (h, w) = res(l);
        a.pw(format!("down{l}"), c, c / 2, h, w);
    }
    for i in 0..sb.latent {
        block(&mut a, format!("latent.block{i}"), 3);
    }
    for l in (0..3).rev() {
        let c = cfg.channels(l);
        let (h, w) = res(l);
        a.pw(format!("up{l}"), c / 2, c, h, w);
        if l > 0 && cfg.skip == SkipMode::Concat {
            a.pw(format!("skip{l}"), 2 * c, c, h, w);
        }
        for i in 0..sb.decoder[l] {
            block(&mut a, format!("dec{l}.block{i}"), l);
        }
    }
    for i in 0..sb.refine {
        block(&mut a, format!("refine.block{i}"), 0);
    }
    a.push("head".into(), dense_params(c0, ic, 3), dense_macs(c0, ic, 3, ph, pw));

    let total_params = a.rows.iter().map(|r| r.params).sum();
    let total_macs: u64 = a.rows.iter().map(|r| r.macs).sum();
    CostReport {
        input: (height, width),
        padded: (ph, pw),
        fused,
        rows: a.rows,
        total_params,
        total_macs,
        total_flops: 2 * total_macs,
        dense_reference: CostRow {
            name: "reference.dense_attention".into(),
            params: 0,
            macs: dense_attention_macs(c0, ph, pw),
        },
    }
}

/// Learnable scalars of a built model (training form unless `fused`).
pub fn count_params(cfg: &ModelConfig, fused: bool) -> u64 {
    cost_report(cfg, 1, 1, fused).total_params
}

pub fn count_macs(cfg: &ModelConfig, height: usize, width: usize, fused: bool) -> u64 {
    cost_report(cfg, height, width, fused).total_macs
}

fn group(n: u64, unit: f64) -> String {
    format!("{:.3}", n as f64 / unit)
}

impl CostReport {
    /// Aligned text table; `detail` lists every layer, otherwise rows are
    /// grouped by their top-level stage.
    pub fn to_table(&self, detail: bool) -> String {
        let mut rows: Vec<CostRow> = Vec::new();
        for r in &self.rows {
            let key = if detail {
                r.name.clone()
            } else {
                r.name.split('.').next().unwrap_or(&r.name).to_string()
            };
            match rows.last_mut() {
                Some(last) if last.name == key => {
                    last.params += r.params;
                    last.macs += r.macs;
                }
                _ => rows.push(CostRow { name: key, ..r.clone() }),
            }
        }
        let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(26);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "input {}x{} (padded {}x{}), {} form",
            self.input.0,
            self.input.1,
            self.padded.0,
            self.padded.1,
            if self.fused { "fused" } else { "training" }
        );
        let _ = writeln!(s, "{:<width$} {:>14} {:>16}", "layer", "params", "MACs");
        for r in &rows {
            let _ = writeln!(s, "{:<width$} {:>14} {:>16}", r.name, r.params, r.macs);
        }
        let _ = writeln!(s, "{:<width$} {:>14} {:>16}", "total", self.total_params, self.total_macs);
        let _ = writeln!(
            s,
            "{:<width$} {:>14} {:>16}",
            self.dense_reference.name, "-", self.dense_reference.macs
        );
        let _ = writeln!(
            s,
            "params {} M, MACs {} G, FLOPs {} G",
            group(self.total_params, 1e6),
            group(self.total_macs, 1e9),
            group(self.total_flops, 1e9)
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One published parameter count to match.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationTarget {
    pub name: String,
    pub config: ModelConfig,
    pub params: f64,
}

/// Published counts for the small, base and base+ models.
pub fn published_targets() -> Vec<CalibrationTarget> {
    let t = |name: &str, config, m: f64| CalibrationTarget {
        name: name.into(),
        config,
        params: m * 1e6,
    };
    vec![
        t("small", ModelConfig::small(), 11.75),
        t("base", ModelConfig::base(), 26.49),
        t("base+", ModelConfig::base_plus(), 33.04),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub expansion: f64,
    pub heads: HeadSchedule,
    pub skip: SkipMode,
    pub block_mode: BlockMode,
}

impl Candidate {
    pub fn label(&self) -> String {
        format!(
            "e={:.4} heads={} skip={} blocks={:?}",
            self.expansion,
            self.heads.label(),
            format!("{:?}", self.skip).to_lowercase(),
            self.block_mode
        )
    }

    pub fn apply(&self, cfg: &ModelConfig) -> ModelConfig {
        ModelConfig {
            expansion: self.expansion,
            heads: self.heads.clone(),
            skip: self.skip,
            block_mode: self.block_mode,
            ..cfg.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchSpace {
    pub expansions: Vec<f64>,
    pub heads: Vec<HeadSchedule>,
    pub skips: Vec<SkipMode>,
    pub block_modes: Vec<BlockMode>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            expansions: vec![2.0, 8.0 / 3.0, 4.0],
            heads: vec![
                HeadSchedule::Doubling { base: 1 },
                HeadSchedule::Doubling { base: 2 },
                HeadSchedule::Constant { heads: 1 },
                HeadSchedule::Constant { heads: 8 },
            ],
            skips: vec![SkipMode::Concat, SkipMode::Add],
            block_modes: vec![BlockMode::MirroredFgtb, BlockMode::MirroredLayers, BlockMode::Split],
        }
    }
}

impl SearchSpace {
    fn candidates(&self) -> Vec<Candidate> {
        let mut out = Vec::new();
        for &expansion in &self.expansions {
            for heads in &self.heads {
                for &skip in &self.skips {
                    for &block_mode in &self.block_modes {
                        out.push(Candidate {
                            expansion,
                            heads: heads.clone(),
                            skip,
                            block_mode,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub candidate: Candidate,
    pub counts: Vec<u64>,
    /// `(count − target) / target` per target.
    pub deviations: Vec<f64>,
    pub max_abs_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub targets: Vec<CalibrationTarget>,
    /// Sorted by `max_abs_deviation`, best first.
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationReport {
    pub fn best(&self) -> &CalibrationRow {
        &self.rows[0]
    }

    pub fn to_table(&self, limit: usize) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self.targets.iter().map(|t| t.name.as_str()).collect();
        let _ = write!(s, "{:<8} {:<14} {:<7} {:<16}", "e", "heads", "skip", "blocks");
        for n in &names {
            let _ = write!(s, " {:>16}", format!("{n} M (dev)"));
        }
        let _ = writeln!(s, " {:>8}", "max|dev|");
        for r in self.rows.iter().take(limit) {
            let c = &r.candidate;
            let _ = write!(
                s,
                "{:<8.4} {:<14} {:<7} {:<16}",
                c.expansion,
                c.heads.label(),
                format!("{:?}", c.skip).to_lowercase(),
                format!("{:?}", c.block_mode)
            );
            for (n, d) in r.counts.iter().zip(&r.deviations) {
                let _ = write!(s, " {:>16}", format!("{:.2} ({:+.1}%)", *n as f64 / 1e6, d * 100.0));
            }
            let _ = writeln!(s, " {:>7.2}%", r.max_abs_deviation * 100.0);
        }
        s
    }
}

/// Grid search minimizing the largest relative deviation from the targets;
/// candidates invalid for any target are skipped. Counts are fused.
pub fn calibrate(targets: &[CalibrationTarget], space: &SearchSpace) -> CalibrationReport {
    let mut rows: Vec<CalibrationRow> = space
        .candidates()
        .into_iter()
        .filter_map(|cand| {
            let mut counts = Vec::new();
            let mut deviations = Vec::new();
            for t in targets {
                let cfg = cand.apply(&t.config);
                cfg.validate().ok()?;
                let n = count_params(&cfg, true);
                counts.push(n);
                deviations.push((n as f64 - t.params) / t.params);
            }
            let max_abs_deviation = deviations.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            Some(CalibrationRow {
                candidate: cand,
                counts,
                deviations,
                max_abs_deviation,
            })
        })
        .collect();
    rows.sort_by(|a, b| a.max_abs_deviation.total_cmp(&b.max_abs_deviation));
    CalibrationReport {
        targets: targets.to_vec(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Model;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            block_counts: [1, 2, 1, 1],
            refinement_blocks: 1,
            window: 4,
            grid: 2,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn pointwise_counts() {
        assert_eq!(pointwise_params(2, 3), 9);
        assert_eq!(pointwise_macs(2, 3, 4, 4), 96);
    }

    #[test]
    fn analytic_count_matches_built_model() {
        for mode in [BlockMode::MirroredFgtb, BlockMode::MirroredLayers, BlockMode::Split] {
            for skip in [SkipMode::Concat, SkipMode::Add] {
                let cfg = ModelConfig { block_mode: mode, skip, ..tiny() };
                let m = Model::build(&cfg).unwrap();
                assert_eq!(count_params(&cfg, false), m.num_params() as u64);
                assert_eq!(count_params(&cfg, true), m.fused().unwrap().num_params() as u64);
            }
        }
    }

    #[test]
    fn totals_are_row_sums() {
        let r = cost_report(&ModelConfig::small(), 64, 64, true);
        assert_eq!(r.total_params, r.rows.iter().map(|r| r.params).sum::<u64>());
        assert_eq!(r.total_macs, r.rows.iter().map(|r| r.macs).sum::<u64>());
        assert_eq!(r.total_flops, 2 * r.total_macs);
    }

    #[test]
    fn attention_macs_scale_linearly_dense_quadratically() {
        for s in [64usize, 128] {
            assert_eq!(ggsa_attention_macs(32, 2, 2 * s, 2 * s, 8), 4 * ggsa_attention_macs(32, 2, s, s, 8));
            assert_eq!(fcsa_attention_macs(32, 2, 2 * s, 2 * s, 16), 4 * fcsa_attention_macs(32, 2, s, s, 16));
            assert_eq!(dense_attention_macs(32, 2 * s, 2 * s), 16 * dense_attention_macs(32, s, s));
        }
        // closed forms: 2·g²·HW·C and 4·d·HW·C
        assert_eq!(ggsa_attention_macs(32, 2, 64, 64, 8), 2 * 64 * 64 * 64 * 32);
        assert_eq!(fcsa_attention_macs(32, 2, 64, 64, 16), 4 * 16 * 64 * 64 * 32);
    }

    #[test]
    fn single_candidate_search_returns_it() {
        let space = SearchSpace {
            expansions: vec![2.0],
            heads: vec![HeadSchedule::Doubling { base: 1 }],
            skips: vec![SkipMode::Concat],
            block_modes: vec![BlockMode::MirroredFgtb],
        };
        let rep = calibrate(&published_targets(), &space);
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.best().candidate.expansion, 2.0);
        assert_eq!(rep.best().counts.len(), 3);
        assert_eq!(rep.targets.len(), 3);
    }

    #[test]
    fn presets_carry_calibrated_choice() {
        let rep = calibrate(&published_targets(), &SearchSpace::default());
        assert!(rep.best().max_abs_deviation < 0.05);
        for t in published_targets() {
            assert_eq!(rep.best().candidate.apply(&t.config), t.config);
        }
    }

    #[test]
    fn table_and_json_render() {
        let r = cost_report(&tiny(), 37, 41, false);
        assert_eq!(r.padded, (40, 48));
        let t = r.to_table(false);
        assert!(t.contains("enc0") && t.contains("total"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["total_params"].as_u64().unwrap(), r.total_params);
    }
}
