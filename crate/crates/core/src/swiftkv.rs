//! The prefill-skipping rewiring.
//!
//! With cutoff `l`, layers `0..l` (0-based) run unchanged. For every later
//! layer `j` the K/V cache is projected from `x_l`, the output of the last
//! retained layer, using trainable copies of the projection weights. Prompt
//! tokens can therefore stop after layer `l - 1`: their later-layer caches are
//! filled by one projection each, and only the final prompt token (and every
//! decode token) walks the full depth.
//!
//! Under cross-layer sharing with group size `g`, consecutive later layers
//! form groups anchored at `l`; only the first layer of a group (its leader)
//! carries K/V weights, and the whole group reads the leader's cache.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{CacheConfig, KvCache};
use crate::model::{
    self, attn_residual, cached_layer, check_cache_at, check_tokens, embed, kv_projection, lm_logits, mlp_residual,
    query_projection, HiddenTrace, LayerView, Parameters,
};
use crate::numerics::{sample_argmax, softmax_in_place, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwiftKvConfig {
    /// Number of leading layers that keep the original wiring (`1 ≤ cutoff ≤ L`).
    pub cutoff: usize,
    /// Consecutive rewired layers sharing one KV cache.
    #[serde(default = "one")]
    pub group: usize,
    #[serde(default)]
    pub early_exit: bool,
    #[serde(default = "default_exit_threshold")]
    pub exit_threshold: f64,
}

fn one() -> usize {
    1
}

fn default_exit_threshold() -> f64 {
    0.95
}

impl SwiftKvConfig {
    pub fn new(cutoff: usize, group: usize) -> Self {
        Self { cutoff, group, early_exit: false, exit_threshold: default_exit_threshold() }
    }

    /// No layer rewired, no sharing.
    pub fn baseline(num_layers: usize) -> Self {
        Self::new(num_layers, 1)
    }

    /// Skips `round(fraction · L)` layers, e.g. `0.5` for "50%".
    pub fn from_fraction(num_layers: usize, fraction: f64, group: usize) -> Self {
        let skipped = (fraction * num_layers as f64).round() as usize;
        Self::new(num_layers.saturating_sub(skipped).max(1), group)
    }

    pub fn with_early_exit(mut self, threshold: f64) -> Self {
        self.early_exit = true;
        self.exit_threshold = threshold;
        self
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.cutoff == 0 || self.cutoff > num_layers {
            return Err(Error::Config(format!("cutoff {} outside 1..={num_layers}", self.cutoff)));
        }
        if self.group == 0 {
            return Err(Error::Config("acrosskv group size must be at least 1".into()));
        }
        if !(self.exit_threshold > 0.0 && self.exit_threshold <= 1.0) {
            return Err(Error::Config(format!("exit_threshold {} outside (0, 1]", self.exit_threshold)));
        }
        Ok(())
    }

    pub fn skipped_layers(&self, num_layers: usize) -> usize {
        num_layers - self.cutoff
    }

    /// Distinct KV caches: one per retained layer plus one per group.
    pub fn num_kv_groups(&self, num_layers: usize) -> usize {
        self.cutoff + self.skipped_layers(num_layers).div_ceil(self.group)
    }
}

/// `(prefill_reduction, kv_reduction)` as fractions of the unmodified model.
pub fn reduction_stats(cfg: &SwiftKvConfig, num_layers: usize) -> (f64, f64) {
    let l = num_layers as f64;
    let prefill = cfg.skipped_layers(num_layers) as f64 / l;
    let kv = 1.0 - cfg.num_kv_groups(num_layers) as f64 / l;
    (prefill, kv)
}

/// Layer → cache-group assignment. Layer indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupMap {
    num_layers: usize,
    cutoff: usize,
    group: usize,
}

impl GroupMap {
    pub fn identity(num_layers: usize) -> Self {
        Self { num_layers, cutoff: num_layers, group: 1 }
    }

    pub fn new(num_layers: usize, cutoff: usize, group: usize) -> Result<Self> {
        SwiftKvConfig::new(cutoff, group).validate(num_layers)?;
        Ok(Self { num_layers, cutoff, group })
    }

    pub fn for_config(num_layers: usize, cfg: &SwiftKvConfig) -> Result<Self> {
        Self::new(num_layers, cfg.cutoff, cfg.group)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn num_groups(&self) -> usize {
        self.cutoff + (self.num_layers - self.cutoff).div_ceil(self.group)
    }

    /// Layer whose K/V weights produce the cache read by `layer`.
    pub fn leader(&self, layer: usize) -> usize {
        if layer < self.cutoff {
            layer
        } else {
            self.cutoff + self.group * ((layer - self.cutoff) / self.group)
        }
    }

    pub fn is_leader(&self, layer: usize) -> bool {
        self.leader(layer) == layer
    }

    pub fn group_of(&self, layer: usize) -> usize {
        if layer < self.cutoff {
            layer
        } else {
            self.cutoff + (layer - self.cutoff) / self.group
        }
    }

    /// Leaders of the rewired layers, ascending.
    pub fn rewired_leaders(&self) -> impl Iterator<Item = usize> + '_ {
        (self.cutoff..self.num_layers).step_by(self.group)
    }
}

/// Which student tensors are trainable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    /// New Q/K/V projections (and the exit head), the default.
    #[default]
    Qkv,
    /// Every weight of the rewired layers (ablation).
    FullLayers,
}

/// Trainable copies of the non-QKV weights of a rewired layer (full-layer ablation only).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCopy {
    pub attn_norm: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewiredLayer {
    pub wq: Matrix,
    /// Present only on group leaders.
    pub wk: Option<Matrix>,
    pub wv: Option<Matrix>,
    pub copy: Option<LayerCopy>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentParameters {
    /// Frozen teacher weights.
    pub base: Parameters,
    pub config: SwiftKvConfig,
    pub scope: TrainScope,
    /// One entry per layer `cutoff..L`.
    pub rewired: Vec<RewiredLayer>,
    pub exit_head: Option<Matrix>,
}

/// Forward mode of the two-mode student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Teacher,
    SwiftKv,
}

/// Copies the teacher's Q/K/V weights of the rewired layers into trainable slots.
pub fn rewire(params: &Parameters, cfg: &SwiftKvConfig) -> Result<StudentParameters> {
    rewire_with_scope(params, cfg, TrainScope::Qkv)
}

pub fn rewire_with_scope(params: &Parameters, cfg: &SwiftKvConfig, scope: TrainScope) -> Result<StudentParameters> {
    let num_layers = params.config.num_layers;
    cfg.validate(num_layers)?;
    let map = GroupMap::for_config(num_layers, cfg)?;
    let rewired = (cfg.cutoff..num_layers)
        .map(|j| {
            let l = &params.layers[j];
            let lead = map.is_leader(j);
            RewiredLayer {
                wq: l.wq.clone(),
                wk: lead.then(|| l.wk.clone()),
                wv: lead.then(|| l.wv.clone()),
                copy: (scope == TrainScope::FullLayers).then(|| LayerCopy {
                    attn_norm: l.attn_norm.clone(),
                    wo: l.wo.clone(),
                    mlp_norm: l.mlp_norm.clone(),
                    w_gate: l.w_gate.clone(),
                    w_up: l.w_up.clone(),
                    w_down: l.w_down.clone(),
                }),
            }
        })
        .collect();
    Ok(StudentParameters {
        base: params.clone(),
        config: cfg.clone(),
        scope,
        rewired,
        exit_head: cfg.early_exit.then(|| params.lm_head.clone()),
    })
}

impl StudentParameters {
    pub fn group_map(&self) -> GroupMap {
        GroupMap::for_config(self.base.config.num_layers, &self.config).expect("validated at rewire")
    }

    pub fn new_cache(&self, cache: &CacheConfig) -> KvCache {
        let c = &self.base.config;
        KvCache::new(self.group_map(), c.d_kv(), cache.quantization, c.precision)
    }

    pub fn cutoff(&self) -> usize {
        self.config.cutoff
    }

    pub(crate) fn rewired(&self, layer: usize) -> &RewiredLayer {
        &self.rewired[layer - self.config.cutoff]
    }

    /// Weights a rewired layer runs with in SwiftKV mode.
    pub(crate) fn rewired_view(&self, layer: usize) -> LayerView<'_> {
        let r = self.rewired(layer);
        let base = LayerView::of(&self.base.layers[layer]);
        match &r.copy {
            Some(c) => LayerView {
                attn_norm: &c.attn_norm,
                wq: &r.wq,
                wo: &c.wo,
                mlp_norm: &c.mlp_norm,
                w_gate: &c.w_gate,
                w_up: &c.w_up,
                w_down: &c.w_down,
            },
            None => LayerView { wq: &r.wq, ..base },
        }
    }

    /// K/V projection of a leader from the cutoff hidden state `x`.
    pub(crate) fn leader_kv(&self, leader: usize, x: &Matrix, positions: &[usize]) -> Result<(Matrix, Matrix)> {
        let r = self.rewired(leader);
        let view = self.rewired_view(leader);
        let (wk, wv) = (r.wk.as_ref().expect("leader carries wk"), r.wv.as_ref().expect("leader carries wv"));
        kv_projection(&self.base.config, view.attn_norm, wk, wv, x, positions)
    }

    /// Trainable tensors with their names, in a fixed order.
    pub fn trainable_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, r) in self.rewired.iter().enumerate() {
            let j = self.config.cutoff + i;
            out.push((format!("rewired.{j}.wq"), &r.wq));
            if let Some(wk) = &r.wk {
                out.push((format!("rewired.{j}.wk"), wk));
            }
            if let Some(wv) = &r.wv {
                out.push((format!("rewired.{j}.wv"), wv));
            }
            if let Some(c) = &r.copy {
                for (name, m) in [
                    ("attn_norm", &c.attn_norm),
                    ("wo", &c.wo),
                    ("mlp_norm", &c.mlp_norm),
                    ("w_gate", &c.w_gate),
                    ("w_up", &c.w_up),
                    ("w_down", &c.w_down),
                ] {
                    out.push((format!("rewired.{j}.{name}"), m));
                }
            }
        }
        if let Some(h) = &self.exit_head {
            out.push(("exit_head".into(), h));
        }
        out
    }

    /// Visits trainable tensors mutably, in the order of [`Self::trainable_tensors`].
    pub fn visit_trainable_mut(&mut self, mut f: impl FnMut(&str, &mut Matrix)) {
        let cutoff = self.config.cutoff;
        for (i, r) in self.rewired.iter_mut().enumerate() {
            let j = cutoff + i;
            f(&format!("rewired.{j}.wq"), &mut r.wq);
            if let Some(wk) = &mut r.wk {
                f(&format!("rewired.{j}.wk"), wk);
            }
            if let Some(wv) = &mut r.wv {
                f(&format!("rewired.{j}.wv"), wv);
            }
            if let Some(c) = &mut r.copy {
                for (name, m) in [
                    ("attn_norm", &mut c.attn_norm),
                    ("wo", &mut c.wo),
                    ("mlp_norm", &mut c.mlp_norm),
                    ("w_gate", &mut c.w_gate),
                    ("w_up", &mut c.w_up),
                    ("w_down", &mut c.w_down),
                ] {
                    f(&format!("rewired.{j}.{name}"), m);
                }
            }
        }
        if let Some(h) = &mut self.exit_head {
            f("exit_head", h);
        }
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.trainable_tensors().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }
}

/// Two-mode training forward over the full sequence. SwiftKV mode keeps every
/// token in every layer; only the K/V source of the rewired layers changes.
pub fn forward_student(student: &StudentParameters, tokens: &[usize], mode: Mode) -> Result<(Matrix, HiddenTrace)> {
    match mode {
        Mode::Teacher => model::forward_full(&student.base, tokens),
        Mode::SwiftKv => swiftkv_forward(student, tokens).map(|(logits, trace, _)| (logits, trace)),
    }
}

/// SwiftKV-mode forward that also returns the early-exit logits when the student has an exit head.
pub fn forward_student_with_exit(
    student: &StudentParameters,
    tokens: &[usize],
) -> Result<(Matrix, HiddenTrace, Option<Matrix>)> {
    swiftkv_forward(student, tokens)
}

fn swiftkv_forward(student: &StudentParameters, tokens: &[usize]) -> Result<(Matrix, HiddenTrace, Option<Matrix>)> {
    let base = &student.base;
    let c = &base.config;
    check_tokens(c, tokens, 0)?;
    let map = student.group_map();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = embed(base, tokens);
    let mut states = Vec::with_capacity(c.num_layers + 1);
    for layer in &base.layers[..student.cutoff()] {
        states.push(x.clone());
        let view = LayerView::of(layer);
        let q = query_projection(c, &view, &x, &positions)?;
        let (k, v) = kv_projection(c, &layer.attn_norm, &layer.wk, &layer.wv, &x, &positions)?;
        x = attn_residual(c, &view, &x, &q, &k, &v, &positions)?;
        x = mlp_residual(c, &view, &x)?;
    }
    let exit = match &student.exit_head {
        Some(h) => Some(lm_logits(base, h, &x)?),
        None => None,
    };
    let shared: Vec<(Matrix, Matrix)> =
        map.rewired_leaders().map(|j| student.leader_kv(j, &x, &positions)).collect::<Result<_>>()?;
    for j in student.cutoff()..c.num_layers {
        states.push(x.clone());
        let view = student.rewired_view(j);
        let (k, v) = &shared[map.group_of(j) - student.cutoff()];
        let q = query_projection(c, &view, &x, &positions)?;
        x = attn_residual(c, &view, &x, &q, k, v, &positions)?;
        x = mlp_residual(c, &view, &x)?;
    }
    states.push(x.clone());
    let logits = lm_logits(base, &base.lm_head, &x)?;
    Ok((logits, HiddenTrace { states }, exit))
}

/// Outcome of one cached step through the student.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// The early-exit head produced these logits.
    pub exited: bool,
}

/// Cached SwiftKV schedule for tokens at positions `start..`: every token runs
/// the retained layers and fills all rewired caches from the cutoff hidden
/// state; only the last token continues through the rewired layers.
fn skip_forward(
    student: &StudentParameters,
    tokens: &[usize],
    start: usize,
    cache: &mut KvCache,
    exit_threshold: Option<f64>,
) -> Result<StepOutput> {
    let base = &student.base;
    let c = &base.config;
    check_tokens(c, tokens, start)?;
    check_cache_at(cache, start)?;
    let map = student.group_map();
    if cache.group_map() != &map {
        return Err(Error::Cache("cache group layout does not match the student".into()));
    }
    if tokens.is_empty() {
        return Err(Error::Config("no tokens to process".into()));
    }
    let positions: Vec<usize> = (start..start + tokens.len()).collect();
    let mut x = embed(base, tokens);
    for (i, layer) in base.layers[..student.cutoff()].iter().enumerate() {
        x = cached_layer(c, &LayerView::of(layer), &layer.wk, &layer.wv, &x, &positions, cache, i)?;
    }
    for j in map.rewired_leaders() {
        let (k, v) = student.leader_kv(j, &x, &positions)?;
        for (r, &pos) in positions.iter().enumerate() {
            cache.append(map.group_of(j), pos, k.row(r), v.row(r))?;
        }
    }
    let last = tokens.len() - 1;
    let mut x = x.slice_rows(last, last + 1);
    let pos = [positions[last]];
    if let Some(threshold) = exit_threshold {
        let head = student.exit_head.as_ref().ok_or(Error::MissingExitHead)?;
        let logits = lm_logits(base, head, &x)?.row(0).to_vec();
        let mut probs = logits.clone();
        softmax_in_place(&mut probs)?;
        if probs.iter().cloned().fold(0.0, f64::max) > threshold {
            return Ok(StepOutput { logits, exited: true });
        }
    }
    for j in student.cutoff()..c.num_layers {
        let view = student.rewired_view(j);
        let q = query_projection(c, &view, &x, &pos)?;
        let (kc, vc) = cache.read_block(map.group_of(j), pos[0] + 1)?;
        x = attn_residual(c, &view, &x, &q, &kc, &vc, &pos)?;
        x = mlp_residual(c, &view, &x)?;
    }
    let logits = lm_logits(base, &base.lm_head, &x)?.row(0).to_vec();
    Ok(StepOutput { logits, exited: false })
}

/// Prefill with layer skipping. Returns the logits of the first output token.
pub fn prefill_skip(student: &StudentParameters, tokens: &[usize], cache: &mut KvCache) -> Result<Vec<f64>> {
    if !cache.is_empty() {
        return Err(Error::Cache("prefill requires an empty cache".into()));
    }
    skip_forward(student, tokens, 0, cache, None).map(|o| o.logits)
}

/// Chunked prefill: like [`prefill_skip`] but continuing an existing cache.
pub fn prefill_chunk_skip(
    student: &StudentParameters,
    tokens: &[usize],
    start: usize,
    cache: &mut KvCache,
) -> Result<Vec<f64>> {
    skip_forward(student, tokens, start, cache, None).map(|o| o.logits)
}

/// One decode token through all layers, with rewired caches filled at the cutoff.
pub fn decode_step_skip(
    student: &StudentParameters,
    token: usize,
    position: usize,
    cache: &mut KvCache,
) -> Result<Vec<f64>> {
    skip_forward(student, &[token], position, cache, None).map(|o| o.logits)
}

/// Decode step that returns the exit head's logits when its top probability
/// exceeds the configured threshold. Rewired caches are filled either way.
pub fn early_exit_decode(
    student: &StudentParameters,
    token: usize,
    position: usize,
    cache: &mut KvCache,
) -> Result<StepOutput> {
    if student.exit_head.is_none() {
        return Err(Error::MissingExitHead);
    }
    skip_forward(student, &[token], position, cache, Some(student.config.exit_threshold))
}

/// Greedy generation on the skipping schedule. Returns the tokens and how many exited early.
pub fn generate_skip(
    student: &StudentParameters,
    prompt: &[usize],
    out_len: usize,
    cache_config: &CacheConfig,
    use_early_exit: bool,
) -> Result<(Vec<usize>, usize)> {
    if out_len == 0 || prompt.is_empty() {
        return Err(Error::Config("prompt and out_len must be non-empty".into()));
    }
    let mut cache = student.new_cache(cache_config);
    let first = prefill_skip(student, prompt, &mut cache)?;
    let mut out = vec![sample_argmax(&first)];
    let mut exits = 0;
    while out.len() < out_len {
        let pos = prompt.len() + out.len() - 1;
        let tok = *out.last().unwrap();
        let logits = if use_early_exit {
            let step = early_exit_decode(student, tok, pos, &mut cache)?;
            exits += step.exited as usize;
            step.logits
        } else {
            decode_step_skip(student, tok, pos, &mut cache)?
        };
        out.push(sample_argmax(&logits));
    }
    Ok((out, exits))
}

/// Reference generation that recomputes the full two-mode forward at every step.
pub fn generate_recompute(
    student: &StudentParameters,
    prompt: &[usize],
    out_len: usize,
    mode: Mode,
) -> Result<Vec<usize>> {
    let mut seq = prompt.to_vec();
    for _ in 0..out_len {
        let (logits, _) = forward_student(student, &seq, mode)?;
        seq.push(sample_argmax(logits.row(seq.len() - 1)));
    }
    Ok(seq.split_off(prompt.len()))
}

/// One row of the exit-alignment table.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub agree: usize,
}

impl AlignmentBin {
    pub fn rate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.agree as f64 / self.count as f64)
    }
}

/// Bins every position of every sequence by the exit head's top probability and
/// records how often its argmax agrees with the full-depth argmax.
pub fn exit_alignment(student: &StudentParameters, corpus: &[Vec<usize>], bins: usize) -> Result<Vec<AlignmentBin>> {
    if student.exit_head.is_none() {
        return Err(Error::MissingExitHead);
    }
    let mut table: Vec<AlignmentBin> = (0..bins)
        .map(|b| AlignmentBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count: 0,
            agree: 0,
        })
        .collect();
    for seq in corpus {
        let (full, _, exit) = forward_student_with_exit(student, seq)?;
        let exit = exit.expect("exit head present");
        for i in 0..seq.len() {
            let mut probs = exit.row(i).to_vec();
            softmax_in_place(&mut probs)?;
            let top = probs.iter().cloned().fold(0.0, f64::max);
            let b = ((top * bins as f64) as usize).min(bins - 1);
            table[b].count += 1;
            table[b].agree += (sample_argmax(exit.row(i)) == sample_argmax(full.row(i))) as usize;
        }
    }
    Ok(table)
}
