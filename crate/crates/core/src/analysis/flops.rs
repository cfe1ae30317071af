//! Per-token FLOPs of prefill and decode under a SwiftKV configuration.
//!
//! Conventions: two flops per multiply-accumulate; the embedding lookup and
//! the output head are both counted as dense `d × V` projections; norms,
//! residual adds and activations are ignored. Attention costs `4·ctx·d` per
//! token per layer, where `ctx` is the number of attended keys, optionally
//! halved by a causal factor when `ctx` is the full sequence length.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::swiftkv::SwiftKvConfig;

/// Architecture numbers needed for cost accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDesc {
    pub name: String,
    pub num_layers: usize,
    pub d_model: usize,
    pub d_kv: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Bytes per stored weight (2 for 16-bit serving).
    pub bytes_per_param: u64,
}

impl ModelDesc {
    pub fn llama3_70b() -> Self {
        Self {
            name: "llama-3.1-70b".into(),
            num_layers: 80,
            d_model: 8192,
            d_kv: 1024,
            d_ff: 28672,
            vocab_size: 128256,
            bytes_per_param: 2,
        }
    }

    pub fn llama3_8b() -> Self {
        Self {
            name: "llama-3.1-8b".into(),
            num_layers: 32,
            d_model: 4096,
            d_kv: 1024,
            d_ff: 14336,
            vocab_size: 128256,
            bytes_per_param: 2,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "llama70b" | "llama-3.1-70b" => Some(Self::llama3_70b()),
            "llama8b" | "llama-3.1-8b" => Some(Self::llama3_8b()),
            _ => None,
        }
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        Self {
            name: "custom".into(),
            num_layers: c.num_layers,
            d_model: c.d_model,
            d_kv: c.d_kv(),
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            bytes_per_param: c.precision.bytes() as u64,
        }
    }

    pub fn kv_geometry(&self) -> crate::kvcache::KvGeometry {
        crate::kvcache::KvGeometry { num_layers: self.num_layers, d_kv: self.d_kv }
    }

    /// Weight count (norm vectors included).
    pub fn parameter_count(&self) -> u64 {
        let (d, dkv, ff, v) = (self.d_model as u64, self.d_kv as u64, self.d_ff as u64, self.vocab_size as u64);
        let per_layer = 2 * d * d + 2 * d * dkv + 3 * d * ff + 2 * d;
        2 * v * d + self.num_layers as u64 * per_layer + d
    }

    pub fn parameter_bytes(&self) -> u64 {
        self.parameter_count() * self.bytes_per_param
    }

    fn vocab_flops(&self) -> f64 {
        2.0 * 2.0 * self.d_model as f64 * self.vocab_size as f64
    }

    fn kv_flops_per_layer(&self) -> f64 {
        2.0 * self.d_model as f64 * 2.0 * self.d_kv as f64
    }

    fn qo_flops_per_layer(&self) -> f64 {
        2.0 * self.d_model as f64 * self.d_model as f64 * 2.0
    }

    fn mlp_flops_per_layer(&self) -> f64 {
        2.0 * self.d_model as f64 * self.d_ff as f64 * 3.0
    }

    fn attn_flops_per_layer(&self, attn: AttnContext) -> f64 {
        4.0 * attn.context * self.d_model as f64 * attn.causal_factor
    }
}

/// Attention context for one token: `context` attended keys, scaled by `causal_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnContext {
    pub context: f64,
    pub causal_factor: f64,
}

impl AttnContext {
    /// Exact number of attended keys.
    pub fn exact(context: f64) -> Self {
        Self { context, causal_factor: 1.0 }
    }

    /// Full sequence length with causal halving.
    pub fn causal(seq_len: f64) -> Self {
        Self { context: seq_len, causal_factor: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopsBreakdown {
    pub vocab: f64,
    pub kv: f64,
    pub qo: f64,
    pub mlp: f64,
    pub attn: f64,
    pub total: f64,
    /// `total` relative to the unmodified model at the same context.
    pub rel: f64,
}

impl FlopsBreakdown {
    fn new(vocab: f64, kv: f64, qo: f64, mlp: f64, attn: f64) -> Self {
        Self { vocab, kv, qo, mlp, attn, total: vocab + kv + qo + mlp + attn, rel: 1.0 }
    }

    fn relative_to(mut self, baseline_total: f64) -> Self {
        self.rel = self.total / baseline_total;
        self
    }
}

fn prefill_raw(desc: &ModelDesc, cfg: &SwiftKvConfig, attn: AttnContext) -> FlopsBreakdown {
    let kv_layers = cfg.num_kv_groups(desc.num_layers) as f64;
    let full_layers = cfg.cutoff as f64;
    FlopsBreakdown::new(
        desc.vocab_flops(),
        desc.kv_flops_per_layer() * kv_layers,
        desc.qo_flops_per_layer() * full_layers,
        desc.mlp_flops_per_layer() * full_layers,
        desc.attn_flops_per_layer(attn) * full_layers,
    )
}

/// Cost of one prompt token that stops at the cutoff (all but the last prompt token).
pub fn flops_prefill_token(desc: &ModelDesc, cfg: &SwiftKvConfig, attn: AttnContext) -> FlopsBreakdown {
    let baseline = prefill_raw(desc, &SwiftKvConfig::baseline(desc.num_layers), attn).total;
    prefill_raw(desc, cfg, attn).relative_to(baseline)
}

fn decode_raw(desc: &ModelDesc, cfg: &SwiftKvConfig, context: f64) -> FlopsBreakdown {
    let layers = desc.num_layers as f64;
    FlopsBreakdown::new(
        desc.vocab_flops(),
        desc.kv_flops_per_layer() * cfg.num_kv_groups(desc.num_layers) as f64,
        desc.qo_flops_per_layer() * layers,
        desc.mlp_flops_per_layer() * layers,
        desc.attn_flops_per_layer(AttnContext::exact(context)) * layers,
    )
}

/// Cost of a token that walks every layer (decode tokens and the final prompt
/// token). `context` counts the attended keys, the token itself included.
pub fn flops_decode_token(desc: &ModelDesc, cfg: &SwiftKvConfig, context: f64) -> FlopsBreakdown {
    let baseline = decode_raw(desc, &SwiftKvConfig::baseline(desc.num_layers), context).total;
    decode_raw(desc, cfg, context).relative_to(baseline)
}

/// Attention context at which the baseline spends `target_attn_flops` per prefill token.
pub fn calibrate_attn_context(desc: &ModelDesc, target_attn_flops: f64, causal_factor: f64) -> AttnContext {
    let per_key = 4.0 * desc.d_model as f64 * causal_factor * desc.num_layers as f64;
    AttnContext { context: target_attn_flops / per_key, causal_factor }
}

/// Baseline, 25%, 50% and 50% with 4-way sharing, in that order.
pub fn breakdown_rows(desc: &ModelDesc, attn: AttnContext) -> Vec<(String, FlopsBreakdown)> {
    let l = desc.num_layers;
    [
        ("Baseline", SwiftKvConfig::baseline(l)),
        ("25% SwiftKV", SwiftKvConfig::from_fraction(l, 0.25, 1)),
        ("50% SwiftKV", SwiftKvConfig::from_fraction(l, 0.5, 1)),
        ("50% SwiftKV + 4x AcrossKV", SwiftKvConfig::from_fraction(l, 0.5, 4)),
    ]
    .into_iter()
    .map(|(name, cfg)| (name.to_string(), flops_prefill_token(desc, &cfg, attn)))
    .collect()
}

const GIGA: f64 = 1e9;

/// CSV with GFlops columns and `rel` as a fraction.
pub fn render_csv(rows: &[(String, FlopsBreakdown)]) -> String {
    let mut s = String::from("model,vocab_gflops,kv_gflops,qo_gflops,mlp_gflops,attn_gflops,total_gflops,rel\n");
    for (name, b) in rows {
        let _ = writeln!(
            s,
            "{name},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6}",
            b.vocab / GIGA,
            b.kv / GIGA,
            b.qo / GIGA,
            b.mlp / GIGA,
            b.attn / GIGA,
            b.total / GIGA,
            b.rel
        );
    }
    s
}

/// Aligned text table in GFlops per prefill token.
pub fn render_table(rows: &[(String, FlopsBreakdown)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut s = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>6}\n",
        "Model", "Vocab", "K,V", "Q,O", "MLP", "Attn.", "Total", "Rel."
    );
    for (name, b) in rows {
        let _ = writeln!(
            s,
            "{name:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>5.1}%",
            b.vocab / GIGA,
            b.kv / GIGA,
            b.qo / GIGA,
            b.mlp / GIGA,
            b.attn / GIGA,
            b.total / GIGA,
            b.rel * 100.0
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calibrated() -> (ModelDesc, AttnContext) {
        let d = ModelDesc::llama3_70b();
        let a = calibrate_attn_context(&d, 160e9, 1.0);
        (d, a)
    }

    #[test]
    fn baseline_row_parts() {
        let (d, a) = calibrated();
        let b = flops_prefill_token(&d, &SwiftKvConfig::baseline(80), a);
        assert!((b.vocab / GIGA - 4.2027).abs() < 1e-3);
        assert!((b.kv / GIGA - 2.6844).abs() < 1e-3);
        assert!((b.qo / GIGA - 21.475).abs() < 1e-2);
        assert!((b.mlp / GIGA - 112.74).abs() < 1e-2);
        assert!((b.attn / GIGA - 160.0).abs() < 1e-9);
        assert_eq!(b.rel, 1.0);
        assert!((b.total - (b.vocab + b.kv + b.qo + b.mlp + b.attn)).abs() < 1.0);
    }

    #[test]
    fn acrosskv_kv_column() {
        let (d, a) = calibrated();
        let b = flops_prefill_token(&d, &SwiftKvConfig::new(40, 4), a);
        assert!((b.kv / GIGA - 2.6844 * 50.0 / 80.0).abs() < 1e-3);
    }

    #[test]
    fn full_cutoff_equals_baseline_and_rel_is_monotone() {
        let (d, a) = calibrated();
        assert_eq!(
            flops_prefill_token(&d, &SwiftKvConfig::new(80, 1), a),
            flops_prefill_token(&d, &SwiftKvConfig::baseline(80), a)
        );
        let mut prev = f64::INFINITY;
        for cutoff in (1..=80).rev() {
            let mut prev_g = f64::INFINITY;
            for g in [1, 2, 4, 8, 16] {
                let r = flops_prefill_token(&d, &SwiftKvConfig::new(cutoff, g), a).rel;
                assert!(r > 0.0 && r <= 1.0);
                assert!(r <= prev_g + 1e-15);
                prev_g = r;
            }
            let r1 = flops_prefill_token(&d, &SwiftKvConfig::new(cutoff, 1), a).rel;
            assert!(r1 <= prev + 1e-15);
            prev = r1;
        }
    }

    #[test]
    fn decode_cost_barely_changes() {
        let d = ModelDesc::llama3_70b();
        for g in [1, 4, 16] {
            let base = flops_decode_token(&d, &SwiftKvConfig::baseline(80), 8000.0).total;
            let swift = flops_decode_token(&d, &SwiftKvConfig::new(40, g), 8000.0).total;
            assert!((swift - base).abs() / base < 0.01);
        }
        assert_eq!(
            flops_decode_token(&d, &SwiftKvConfig::new(80, 1), 100.0),
            flops_decode_token(&d, &SwiftKvConfig::baseline(80), 100.0)
        );
    }

    #[test]
    fn rendered_table_shows_rel_column() {
        let (d, a) = calibrated();
        let t = render_table(&breakdown_rows(&d, a));
        assert!(t.contains("51.0%") || t.contains("51.1%"), "{t}");
        let csv = render_csv(&breakdown_rows(&d, a));
        assert_eq!(csv.lines().count(), 5);
    }
}
