//! Closed-form FLOPs and parameter calculators plus an exhaustive
//! per-tensor counter.
//!
//! The closed forms count weights only (no biases, layer norms, stem or
//! head) and measure multiply-accumulates, so all results are exact
//! integers. The exhaustive convention walks every learnable tensor and
//! every forward operation including the stem, head, encodings, biases and
//! normalizations; it is therefore always >= the formula count. Elementwise
//! costs use fixed documented constants (8 per LN/GELU/sigmoid element,
//! 4 per softmax element, 1 per add).

use serde::Serialize;

use crate::error::TntError;
use crate::model::{param_specs, TntConfig};

// ── Closed forms ─────────────────────────────────────────────────────────

/// Standard transformer block: `2 n d (6d + n)` multiply-accumulates.
pub fn flops_standard_block(n: u64, d: u64) -> u64 {
    assert!(n >= 1 && d >= 1, "flops_standard_block needs n, d >= 1");
    2 * n * d * (6 * d + n)
}

/// General form `2nd(dk+dv) + n^2(dk+dv) + 2nddr`; collapses to
/// [`flops_standard_block`] when `dk = dv = d` and `r = 4`.
pub fn flops_standard_block_general(n: u64, d: u64, dk: u64, dv: u64, r: u64) -> u64 {
    assert!(n >= 1 && d >= 1 && dk >= 1 && dv >= 1 && r >= 1);
    2 * n * d * (dk + dv) + n * n * (dk + dv) + 2 * n * d * d * r
}

/// Standard block weights: `12 d^2`.
pub fn params_standard_block(d: u64) -> u64 {
    assert!(d >= 1, "params_standard_block needs d >= 1");
    12 * d * d
}

/// TNT block: inner `2nmc(6c+m)` + fusion `nmcd` + outer `2nd(6d+n)`.
pub fn flops_tnt_block(n: u64, m: u64, c: u64, d: u64) -> u64 {
    assert!(n >= 1 && m >= 1 && c >= 1 && d >= 1, "flops_tnt_block needs all args >= 1");
    2 * n * m * c * (6 * c + m) + n * m * c * d + 2 * n * d * (6 * d + n)
}

/// TNT block weights: `12 c^2 + m c d + 12 d^2`.
pub fn params_tnt_block(m: u64, c: u64, d: u64) -> u64 {
    assert!(m >= 1 && c >= 1 && d >= 1, "params_tnt_block needs all args >= 1");
    12 * c * c + m * c * d + 12 * d * d
}

/// Ratio truncated (not rounded) to two decimals, the convention the
/// published 1.14x / 1.08x figures follow.
pub fn ratio_floor_2dp(x: f64) -> f64 {
    (x * 100.0).floor() / 100.0
}

// ── Exhaustive counters ──────────────────────────────────────────────────

/// Every learnable tensor of the configuration, summed.
pub fn exhaustive_param_count(config: &TntConfig) -> u64 {
    param_specs(config).iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum()
}

struct FlopCounter {
    total: u64,
}

impl FlopCounter {
    fn linear(&mut self, rows: u64, fan_in: u64, fan_out: u64) {
        self.total += rows * fan_in * fan_out + rows * fan_out;
    }
    fn layer_norm(&mut self, rows: u64, dim: u64) {
        self.total += 8 * rows * dim;
    }
    fn elementwise(&mut self, elems: u64, cost: u64) {
        self.total += elems * cost;
    }
    fn msa(&mut self, batch: u64, t: u64, dim: u64, heads: u64) {
        for _ in 0..4 {
            self.linear(batch * t, dim, dim); // q, k, v, o
        }
        let dh = dim / heads;
        self.total += batch * heads * t * t * dh; // Q K^T
        self.total += batch * heads * t * t; // scaling
        self.elementwise(batch * heads * t * t, 4); // softmax
        self.total += batch * heads * t * t * dh; // attn V
    }
    fn block(&mut self, batch: u64, t: u64, dim: u64, r: u64, heads: u64) {
        self.layer_norm(batch * t, dim);
        self.msa(batch, t, dim, heads);
        self.elementwise(batch * t * dim, 1); // residual
        self.layer_norm(batch * t, dim);
        self.linear(batch * t, dim, r * dim);
        self.elementwise(batch * t * r * dim, 8); // gelu
        self.linear(batch * t, r * dim, dim);
        self.elementwise(batch * t * dim, 1); // residual
    }
    fn se(&mut self, tokens: u64, dim: u64) {
        self.elementwise(tokens * dim, 1); // mean
        self.linear(1, dim, dim / 4);
        self.elementwise(dim / 4, 8); // gelu
        self.linear(1, dim / 4, dim);
        self.elementwise(dim, 8); // sigmoid
        self.elementwise(tokens * dim, 1); // gate multiply
    }
}

/// Forward cost of one image under the exhaustive convention.
pub fn exhaustive_flops(config: &TntConfig) -> u64 {
    let n = config.n() as u64;
    let m = config.m() as u64;
    let c = config.inner_dim as u64;
    let d = config.outer_dim as u64;
    let r = config.mlp_ratio as u64;
    let (ih, oh) = (config.inner_heads as u64, config.outer_heads as u64);
    let mut f = FlopCounter { total: 0 };

    // Stem: word projection plus the two position-encoding adds.
    f.linear(n * m, config.word_dim() as u64, c);
    if config.pos_enc.word {
        f.elementwise(n * m * c, 1);
    }
    if config.pos_enc.sentence {
        f.elementwise((n + 1) * d, 1);
    }

    for l in 1..=config.depth {
        if config.is_tnt_layer(l) {
            f.block(n, m, c, r, ih);
            if config.se {
                f.se(n * m, c); // word gate is per sentence but same totals
            }
            if config.fusion_ln {
                f.layer_norm(n, m * c);
            }
            f.linear(n, m * c, d);
            f.elementwise(n * d, 1); // add into sentences
            f.block(1, n + 1, d, r, oh);
            if config.se {
                f.se(n + 1, d);
            }
        } else {
            f.block(1, n + 1, d, r, oh);
        }
    }

    f.layer_norm(n + 1, d);
    f.linear(1, d, config.n_classes as u64);
    f.total
}

// ── Model report ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct LayerComplexity {
    pub index: usize,
    pub kind: String,
    pub formula_flops: u64,
    pub formula_params: u64,
}

/// FLOPs/parameter accounting for a whole configuration under both the
/// formula and exhaustive conventions, plus the per-block TNT/standard
/// ratios for its (n, m, c, d).
#[derive(Debug, Clone, Serialize)]
pub struct ComplexityReport {
    pub n: u64,
    pub m: u64,
    pub inner_dim: u64,
    pub outer_dim: u64,
    pub per_layer: Vec<LayerComplexity>,
    pub formula_flops_total: u64,
    pub formula_params_total: u64,
    pub exhaustive_flops_total: u64,
    pub exhaustive_params_total: u64,
    pub block_flops_ratio: f64,
    pub block_params_ratio: f64,
}

pub fn model_report(config: &TntConfig) -> Result<ComplexityReport, TntError> {
    config.validate()?;
    let n = config.n() as u64;
    let m = config.m() as u64;
    let c = config.inner_dim as u64;
    let d = config.outer_dim as u64;
    let per_layer: Vec<LayerComplexity> = (1..=config.depth)
        .map(|l| {
            if config.is_tnt_layer(l) {
                LayerComplexity {
                    index: l,
                    kind: "tnt".into(),
                    formula_flops: flops_tnt_block(n, m, c, d),
                    formula_params: params_tnt_block(m, c, d),
                }
            } else {
                LayerComplexity {
                    index: l,
                    kind: "standard".into(),
                    formula_flops: flops_standard_block(n, d),
                    formula_params: params_standard_block(d),
                }
            }
        })
        .collect();
    Ok(ComplexityReport {
        n,
        m,
        inner_dim: c,
        outer_dim: d,
        formula_flops_total: per_layer.iter().map(|l| l.formula_flops).sum(),
        formula_params_total: per_layer.iter().map(|l| l.formula_params).sum(),
        exhaustive_flops_total: exhaustive_flops(config),
        exhaustive_params_total: exhaustive_param_count(config),
        block_flops_ratio: flops_tnt_block(n, m, c, d) as f64 / flops_standard_block(n, d) as f64,
        block_params_ratio: params_tnt_block(m, c, d) as f64 / params_standard_block(d) as f64,
        per_layer,
    })
}

/// "5.15 B" / "23.63 M" style rendering for table output.
pub fn human(v: u64) -> String {
    let x = v as f64;
    if x >= 1e9 {
        format!("{:.2} B", x / 1e9)
    } else if x >= 1e6 {
        format!("{:.2} M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.2} K", x / 1e3)
    } else {
        format!("{v}")
    }
}

impl ComplexityReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "n={} m={} c={} d={}\n",
            self.n, self.m, self.inner_dim, self.outer_dim
        ));
        out.push_str(&format!("{:<6} {:<9} {:>16} {:>14}\n", "layer", "kind", "flops", "params"));
        for l in &self.per_layer {
            out.push_str(&format!(
                "{:<6} {:<9} {:>16} {:>14}\n",
                l.index, l.kind, l.formula_flops, l.formula_params
            ));
        }
        out.push_str(&format!(
            "formula totals    flops {:>16} ({})  params {:>14} ({})\n",
            self.formula_flops_total,
            human(self.formula_flops_total),
            self.formula_params_total,
            human(self.formula_params_total),
        ));
        out.push_str(&format!(
            "exhaustive totals flops {:>16} ({})  params {:>14} ({})\n",
            self.exhaustive_flops_total,
            human(self.exhaustive_flops_total),
            self.exhaustive_params_total,
            human(self.exhaustive_params_total),
        ));
        out.push_str(&format!(
            "block ratios (tnt/standard): flops {:.2}x  params {:.2}x\n",
            ratio_floor_2dp(self.block_flops_ratio),
            ratio_floor_2dp(self.block_params_ratio),
        ));
        out
    }
}
