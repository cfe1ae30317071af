//! Llama-style GQA decoder: RMSNorm, rotary positions, SwiGLU MLP, untied head.
//!
//! Three execution paths share the same building blocks:
//! [`forward_full`] recomputes everything from token ids and records the
//! hidden-state trace, [`forward_cached`] appends to a [`KvCache`] (prefill or
//! chunked prefill), and [`decode_step`] is the one-token special case.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{CacheConfig, KvCache, KvGeometry};
use crate::numerics::flops::{self, OpClass};
use crate::numerics::{matmul, rmsnorm_rows, rope_apply, sample_argmax, silu, Matrix, Precision};
use crate::swiftkv::GroupMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub rms_eps: f64,
    pub max_seq_len: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// The small configuration used throughout the tests.
    pub fn toy() -> Self {
        Self {
            num_layers: 8,
            d_model: 64,
            num_heads: 8,
            num_kv_heads: 2,
            head_dim: 8,
            d_ff: 172,
            vocab_size: 256,
            rope_theta: 10000.0,
            rms_eps: 1e-5,
            max_seq_len: 256,
            precision: Precision::Double,
        }
    }

    pub fn d_kv(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn kv_geometry(&self) -> KvGeometry {
        KvGeometry { num_layers: self.num_layers, d_kv: self.d_kv() }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.num_heads * self.head_dim != self.d_model {
            return Err(Error::Config(format!(
                "num_heads ({}) x head_dim ({}) must equal d_model ({})",
                self.num_heads, self.head_dim, self.d_model
            )));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::Config(format!(
                "num_heads ({}) must be divisible by num_kv_heads ({})",
                self.num_heads, self.num_kv_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head_dim must be even for rotary embeddings, got {}", self.head_dim)));
        }
        if !(self.rms_eps > 0.0) || !(self.rope_theta > 0.0) {
            return Err(Error::Config("rms_eps and rope_theta must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of one decoder layer. Norm weights are `1 × d` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    /// `V × d`
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Matrix,
    /// `d × V`
    pub lm_head: Matrix,
}

impl Parameters {
    pub fn new_cache(&self, cache: &CacheConfig) -> KvCache {
        KvCache::new(
            GroupMap::identity(self.config.num_layers),
            self.config.d_kv(),
            cache.quantization,
            self.config.precision,
        )
    }

    /// Named tensors in a fixed order (used by checkpoints and parameter counting).
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in l.named() {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }
}

impl LayerWeights {
    pub fn named(&self) -> [(&'static str, &Matrix); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }
}

/// Per-layer hidden states: entry `i` is the input of layer `i` (0-based), and
/// the last entry is the output of the final layer before the final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace {
    pub states: Vec<Matrix>,
}

impl HiddenTrace {
    pub fn num_layers(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

/// Scaled-normal initialisation, std `1/sqrt(fan_in)`. Norm weights start at one.
/// The embedding is treated as a one-hot projection (fan-in 1).
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = config.precision;
    let mut normal = |rows: usize, cols: usize, fan_in: usize| {
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        Matrix::from_fn(rows, cols, p, |_, _| dist.sample(&mut rng))
    };
    let (d, dkv, ff, v) = (config.d_model, config.d_kv(), config.d_ff, config.vocab_size);
    let embedding = normal(v, d, 1);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            attn_norm: Matrix::from_fn(1, d, p, |_, _| 1.0),
            wq: normal(d, d, d),
            wk: normal(d, dkv, d),
            wv: normal(d, dkv, d),
            wo: normal(d, d, d),
            mlp_norm: Matrix::from_fn(1, d, p, |_, _| 1.0),
            w_gate: normal(d, ff, d),
            w_up: normal(d, ff, d),
            w_down: normal(ff, d, ff),
        });
    }
    let final_norm = Matrix::from_fn(1, d, p, |_, _| 1.0);
    let lm_head = normal(d, v, d);
    Ok(Parameters { config: config.clone(), embedding, layers, final_norm, lm_head })
}

/// Borrowed view of the weights a layer runs with. Lets the student mix
/// frozen base tensors with its trainable copies.
#[derive(Clone, Copy)]
pub(crate) struct LayerView<'a> {
    pub attn_norm: &'a Matrix,
    pub wq: &'a Matrix,
    pub wo: &'a Matrix,
    pub mlp_norm: &'a Matrix,
    pub w_gate: &'a Matrix,
    pub w_up: &'a Matrix,
    pub w_down: &'a Matrix,
}

impl<'a> LayerView<'a> {
    pub fn of(layer: &'a LayerWeights) -> Self {
        Self {
            attn_norm: &layer.attn_norm,
            wq: &layer.wq,
            wo: &layer.wo,
            mlp_norm: &layer.mlp_norm,
            w_gate: &layer.w_gate,
            w_up: &layer.w_up,
            w_down: &layer.w_down,
        }
    }
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[usize], start: usize) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::TokenOutOfRange { token: t, vocab: config.vocab_size });
    }
    let end = start + tokens.len();
    if end > config.max_seq_len {
        return Err(Error::SequenceTooLong { len: end, max: config.max_seq_len });
    }
    Ok(())
}

/// Embedding rows for `tokens`. Counted as a dense `d × V` projection per token.
pub(crate) fn embed(params: &Parameters, tokens: &[usize]) -> Matrix {
    let c = &params.config;
    flops::record_as(OpClass::Vocab, (2 * c.d_model * c.vocab_size * tokens.len()) as u64);
    params.embedding.select_rows(tokens)
}

pub(crate) fn project(x: &Matrix, w: &Matrix, class: OpClass) -> Result<Matrix> {
    flops::with_class(class, || matmul(x, w))
}

/// Normed input followed by K and V projections with rotary positions on K.
pub(crate) fn kv_projection(
    config: &ModelConfig,
    attn_norm: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    x: &Matrix,
    positions: &[usize],
) -> Result<(Matrix, Matrix)> {
    let h = rmsnorm_rows(x, attn_norm, config.rms_eps)?;
    let k = project(&h, wk, OpClass::Kv)?;
    let v = project(&h, wv, OpClass::Kv)?;
    Ok((rope_apply(&k, positions, config.rope_theta, config.head_dim)?, v))
}

pub(crate) fn query_projection(
    config: &ModelConfig,
    view: &LayerView,
    x: &Matrix,
    positions: &[usize],
) -> Result<Matrix> {
    let h = rmsnorm_rows(x, view.attn_norm, config.rms_eps)?;
    let q = project(&h, view.wq, OpClass::Qo)?;
    rope_apply(&q, positions, config.rope_theta, config.head_dim)
}

/// Causal GQA attention. Key row `j` sits at position `j`; query `i` sees keys
/// `0..=positions[i]`. With `keep_probs` the softmax rows are returned as
/// `probs[i * num_heads + h]`.
pub(crate) fn attention(
    config: &ModelConfig,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    positions: &[usize],
    keep_probs: bool,
) -> Result<(Matrix, Vec<Vec<f64>>)> {
    let (nh, hd) = (config.num_heads, config.head_dim);
    let per_kv = nh / config.num_kv_heads;
    if q.cols() != nh * hd || k.cols() != config.d_kv() || v.shape() != k.shape() {
        return Err(Error::shape("attention", format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let p = q.precision();
    let mut out = Matrix::zeros(q.rows(), q.cols(), p);
    let mut kept = Vec::new();
    let mut counted = 0u64;
    for (i, &pos) in positions.iter().enumerate() {
        let ctx = (pos + 1).min(k.rows());
        counted += (4 * ctx * nh * hd) as u64;
        for h in 0..nh {
            let kvh = h / per_kv;
            let qh = &q.row(i)[h * hd..(h + 1) * hd];
            let mut scores: Vec<f64> = (0..ctx)
                .map(|j| {
                    let kj = &k.row(j)[kvh * hd..(kvh + 1) * hd];
                    qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect();
            crate::numerics::softmax_in_place(&mut scores).map_err(|_| Error::NoFiniteEntry { row: i })?;
            let dst = &mut out.row_mut(i)[h * hd..(h + 1) * hd];
            for (j, &w) in scores.iter().enumerate() {
                let vj = &v.row(j)[kvh * hd..(kvh + 1) * hd];
                for (o, x) in dst.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
            if p == Precision::Single {
                dst.iter_mut().for_each(|x| *x = p.round(*x));
            }
            if keep_probs {
                kept.push(scores);
            }
        }
    }
    flops::record_as(OpClass::Attn, counted);
    Ok((out, kept))
}

/// `x + attention(q, k, v) · W_O`
pub(crate) fn attn_residual(
    config: &ModelConfig,
    view: &LayerView,
    x: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    positions: &[usize],
) -> Result<Matrix> {
    let (a, _) = attention(config, q, k, v, positions, false)?;
    x.add(&project(&a, view.wo, OpClass::Qo)?)
}

/// `x + (silu(h·W_gate) ⊙ h·W_up) · W_down` with `h = rmsnorm(x)`.
pub(crate) fn mlp_residual(config: &ModelConfig, view: &LayerView, x: &Matrix) -> Result<Matrix> {
    let h = rmsnorm_rows(x, view.mlp_norm, config.rms_eps)?;
    let g = project(&h, view.w_gate, OpClass::Mlp)?;
    let u = project(&h, view.w_up, OpClass::Mlp)?;
    let p = g.precision();
    let act = Matrix::from_vec(
        g.rows(),
        g.cols(),
        g.data().iter().zip(u.data()).map(|(a, b)| p.round(silu(*a) * b)).collect(),
        p,
    )?;
    x.add(&project(&act, view.w_down, OpClass::Mlp)?)
}

pub(crate) fn lm_logits(params: &Parameters, head: &Matrix, x: &Matrix) -> Result<Matrix> {
    let h = rmsnorm_rows(x, &params.final_norm, params.config.rms_eps)?;
    project(&h, head, OpClass::Vocab)
}

/// Full causal forward over `tokens` without a cache, recording every layer input.
pub fn forward_full(params: &Parameters, tokens: &[usize]) -> Result<(Matrix, HiddenTrace)> {
    let c = &params.config;
    check_tokens(c, tokens, 0)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = embed(params, tokens);
    let mut states = Vec::with_capacity(c.num_layers + 1);
    for layer in &params.layers {
        states.push(x.clone());
        let view = LayerView::of(layer);
        let q = query_projection(c, &view, &x, &positions)?;
        let (k, v) = kv_projection(c, &layer.attn_norm, &layer.wk, &layer.wv, &x, &positions)?;
        x = attn_residual(c, &view, &x, &q, &k, &v, &positions)?;
        x = mlp_residual(c, &view, &x)?;
    }
    states.push(x.clone());
    let logits = lm_logits(params, &params.lm_head, &x)?;
    Ok((logits, HiddenTrace { states }))
}

/// One layer over a chunk of tokens at `positions`, appending its K/V to
/// `group` and attending over everything the group holds.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cached_layer(
    config: &ModelConfig,
    view: &LayerView,
    wk: &Matrix,
    wv: &Matrix,
    x: &Matrix,
    positions: &[usize],
    cache: &mut KvCache,
    group: usize,
) -> Result<Matrix> {
    let q = query_projection(config, view, x, positions)?;
    let (k, v) = kv_projection(config, view.attn_norm, wk, wv, x, positions)?;
    for (r, &pos) in positions.iter().enumerate() {
        cache.append(group, pos, k.row(r), v.row(r))?;
    }
    let end = positions.last().map_or(0, |p| p + 1);
    let (kc, vc) = cache.read_block(group, end)?;
    let x = attn_residual(config, view, x, &q, &kc, &vc, positions)?;
    mlp_residual(config, view, &x)
}

pub(crate) fn check_cache_at(cache: &KvCache, start: usize) -> Result<()> {
    match cache.len() {
        Some(len) if len == start => Ok(()),
        Some(len) => Err(Error::Cache(format!("cache holds {len} positions but input starts at position {start}"))),
        None => Err(Error::Cache("cache groups have unequal lengths".into())),
    }
}

/// Runs `tokens` at positions `start..` through every layer, appending to the
/// cache. Returns logits for every input row. Works for prefill, chunked
/// prefill and single-token decode.
pub fn forward_cached(params: &Parameters, tokens: &[usize], start: usize, cache: &mut KvCache) -> Result<Matrix> {
    let c = &params.config;
    check_tokens(c, tokens, start)?;
    check_cache_at(cache, start)?;
    if cache.num_groups() != c.num_layers {
        return Err(Error::Cache(format!("cache has {} groups for {} layers", cache.num_groups(), c.num_layers)));
    }
    let positions: Vec<usize> = (start..start + tokens.len()).collect();
    let mut x = embed(params, tokens);
    for (i, layer) in params.layers.iter().enumerate() {
        x = cached_layer(c, &LayerView::of(layer), &layer.wk, &layer.wv, &x, &positions, cache, i)?;
    }
    lm_logits(params, &params.lm_head, &x)
}

/// Appends one token at `position` and returns next-token logits.
pub fn decode_step(params: &Parameters, token: usize, position: usize, cache: &mut KvCache) -> Result<Vec<f64>> {
    let logits = forward_cached(params, &[token], position, cache)?;
    Ok(logits.row(0).to_vec())
}

/// Greedy decoding of exactly `out_len` tokens (no stop token).
pub fn generate(
    params: &Parameters,
    prompt: &[usize],
    out_len: usize,
    cache_config: &CacheConfig,
) -> Result<Vec<usize>> {
    if out_len == 0 {
        return Err(Error::Config("out_len must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Config("prompt must not be empty".into()));
    }
    let mut cache = params.new_cache(cache_config);
    let logits = forward_cached(params, prompt, 0, &mut cache)?;
    let mut out = vec![sample_argmax(logits.row(logits.rows() - 1))];
    while out.len() < out_len {
        let pos = prompt.len() + out.len() - 1;
        let next = decode_step(params, *out.last().unwrap(), pos, &mut cache)?;
        out.push(sample_argmax(&next));
    }
    Ok(out)
}
