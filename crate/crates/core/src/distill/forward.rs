//! Taped SwiftKV-mode forward.
//!
//! Layers below the cutoff are frozen, so their output `x_cut` is computed once
//! without a tape (the same teacher forward also yields the target logits) and
//! enters the tape as a constant.

use crate::error::Result;
use crate::model::{check_tokens, forward_full, ModelConfig};
use crate::numerics::Matrix;
use crate::swiftkv::{forward_student_with_exit, StudentParameters};

use super::loss::distill_loss_value;

use super::tape::{Tape, Var};

pub struct StudentTape {
    pub tape: Tape,
    pub logits: Var,
    pub exit_logits: Option<Var>,
    pub loss: Var,
}

struct Weights<'a> {
    trainable: bool,
    tape: &'a mut Tape,
}

impl Weights<'_> {
    fn leaf(&mut self, name: String, m: &Matrix) -> Var {
        if self.trainable {
            self.tape.param(name, m.clone())
        } else {
            self.tape.constant(m.clone())
        }
    }
}

fn taped_kv(
    tape: &mut Tape,
    c: &ModelConfig,
    norm: Var,
    wk: Var,
    wv: Var,
    x: Var,
    pos: &[usize],
) -> Result<(Var, Var)> {
    let h = tape.rmsnorm(x, norm, c.rms_eps)?;
    let k = tape.matmul(h, wk)?;
    let k = tape.rope(k, pos, c.rope_theta, c.head_dim)?;
    let v = tape.matmul(h, wv)?;
    Ok((k, v))
}

/// Records the SwiftKV-mode forward of `tokens` and the distillation loss
/// against the teacher (`student.base`). With an exit head the exit loss is
/// added with equal weight.
pub fn student_loss(student: &StudentParameters, tokens: &[usize], temperature: f64) -> Result<StudentTape> {
    let base = &student.base;
    let c = &base.config;
    check_tokens(c, tokens, 0)?;
    let (teacher_logits, trace) = forward_full(base, tokens)?;
    let cutoff = student.cutoff();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let map = student.group_map();
    let full = student.rewired.iter().any(|r| r.copy.is_some());

    let mut tape = Tape::new();
    let x_cut = tape.constant(trace.states[cutoff].clone());
    let final_norm = tape.constant(base.final_norm.clone());

    // Per-layer weights; the layer-copy tensors are trainable only in the full-layer scope.
    let mut norms = Vec::new();
    for j in cutoff..c.num_layers {
        let view = student.rewired_view(j);
        let mut w = Weights { trainable: full, tape: &mut tape };
        let attn_norm = w.leaf(format!("rewired.{j}.attn_norm"), view.attn_norm);
        norms.push(attn_norm);
    }
    let mut shared = Vec::new();
    for j in map.rewired_leaders() {
        let r = student.rewired(j);
        let wk = tape.param(format!("rewired.{j}.wk"), r.wk.clone().expect("leader carries wk"));
        let wv = tape.param(format!("rewired.{j}.wv"), r.wv.clone().expect("leader carries wv"));
        shared.push(taped_kv(&mut tape, c, norms[j - cutoff], wk, wv, x_cut, &positions)?);
    }

    let mut x = x_cut;
    for j in cutoff..c.num_layers {
        let view = student.rewired_view(j);
        let attn_norm = norms[j - cutoff];
        let wq = tape.param(format!("rewired.{j}.wq"), view.wq.clone());
        let mut w = Weights { trainable: full, tape: &mut tape };
        let wo = w.leaf(format!("rewired.{j}.wo"), view.wo);
        let mlp_norm = w.leaf(format!("rewired.{j}.mlp_norm"), view.mlp_norm);
        let w_gate = w.leaf(format!("rewired.{j}.w_gate"), view.w_gate);
        let w_up = w.leaf(format!("rewired.{j}.w_up"), view.w_up);
        let w_down = w.leaf(format!("rewired.{j}.w_down"), view.w_down);

        let (k, v) = shared[map.group_of(j) - cutoff];
        let h = tape.rmsnorm(x, attn_norm, c.rms_eps)?;
        let q = tape.matmul(h, wq)?;
        let q = tape.rope(q, &positions, c.rope_theta, c.head_dim)?;
        let a = tape.attention(c, q, k, v, &positions)?;
        let o = tape.matmul(a, wo)?;
        x = tape.add(x, o)?;
        let h = tape.rmsnorm(x, mlp_norm, c.rms_eps)?;
        let g = tape.matmul(h, w_gate)?;
        let u = tape.matmul(h, w_up)?;
        let s = tape.swiglu(g, u)?;
        let d = tape.matmul(s, w_down)?;
        x = tape.add(x, d)?;
    }
    let head = tape.constant(base.lm_head.clone());
    let h = tape.rmsnorm(x, final_norm, c.rms_eps)?;
    let logits = tape.matmul(h, head)?;
    let mut loss = tape.distill_loss(logits, &teacher_logits, temperature)?;

    let exit_logits = match &student.exit_head {
        Some(e) => {
            let e = tape.param("exit_head", e.clone());
            let h = tape.rmsnorm(x_cut, final_norm, c.rms_eps)?;
            let l = tape.matmul(h, e)?;
            let exit_loss = tape.distill_loss(l, &teacher_logits, temperature)?;
            loss = tape.add(loss, exit_loss)?;
            Some(l)
        }
        None => None,
    };
    Ok(StudentTape { tape, logits, exit_logits, loss })
}

/// The same loss as [`student_loss`] from the plain (untaped) forward passes.
pub fn untaped_loss(student: &StudentParameters, tokens: &[usize], temperature: f64) -> Result<f64> {
    let (teacher, _) = forward_full(&student.base, tokens)?;
    let (logits, _, exit) = forward_student_with_exit(student, tokens)?;
    let mut loss = distill_loss_value(&logits, &teacher, temperature)?;
    if let Some(e) = exit {
        loss += distill_loss_value(&e, &teacher, temperature)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_random;
    use crate::swiftkv::{rewire, rewire_with_scope, SwiftKvConfig, TrainScope};

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            d_model: 16,
            num_heads: 4,
            num_kv_heads: 2,
            head_dim: 4,
            d_ff: 24,
            vocab_size: 32,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn taped_logits_match_untaped_forward() {
        let params = init_random(&cfg(), 3).unwrap();
        for scope in [TrainScope::Qkv, TrainScope::FullLayers] {
            let s = rewire_with_scope(&params, &SwiftKvConfig::new(2, 2).with_early_exit(0.95), scope).unwrap();
            let tokens = [1, 5, 9, 2, 31, 0];
            let st = student_loss(&s, &tokens, 2.0).unwrap();
            let (logits, _, exit) = forward_student_with_exit(&s, &tokens).unwrap();
            assert!(st.tape.value(st.logits).max_abs_diff(&logits) < 1e-12);
            assert!(st.tape.value(st.exit_logits.unwrap()).max_abs_diff(&exit.unwrap()) < 1e-12);
            let l = untaped_loss(&s, &tokens, 2.0).unwrap();
            assert!((st.tape.value(st.loss).get(0, 0) - l).abs() < 1e-12);
            assert!(l > 0.0);
        }
    }

    #[test]
    fn gradients_cover_exactly_the_trainable_set() {
        let params = init_random(&cfg(), 4).unwrap();
        for (scope, exit) in [(TrainScope::Qkv, false), (TrainScope::Qkv, true), (TrainScope::FullLayers, true)] {
            let mut sk = SwiftKvConfig::new(2, 2);
            if exit {
                sk = sk.with_early_exit(0.95);
            }
            let s = rewire_with_scope(&params, &sk, scope).unwrap();
            let mut st = student_loss(&s, &[3, 4, 5, 6], 2.0).unwrap();
            let g = st.tape.backward(st.loss).unwrap();
            let mut names: Vec<String> = s.trainable_tensors().into_iter().map(|(n, _)| n).collect();
            names.sort();
            assert_eq!(g.keys().cloned().collect::<Vec<_>>(), names);
        }
    }

    #[test]
    fn loss_is_zero_without_rewired_layers() {
        let params = init_random(&cfg(), 5).unwrap();
        let s = rewire(&params, &SwiftKvConfig::baseline(4)).unwrap();
        let st = student_loss(&s, &[1, 2, 3], 2.0).unwrap();
        assert!(st.tape.value(st.loss).get(0, 0).abs() < 1e-14);
    }

    #[test]
    fn doubling_the_loss_doubles_gradients() {
        let params = init_random(&cfg(), 6).unwrap();
        let s = rewire(&params, &SwiftKvConfig::new(2, 1)).unwrap();
        let mut a = student_loss(&s, &[7, 8, 9, 10], 2.0).unwrap();
        let ga = a.tape.backward(a.loss).unwrap();
        let mut b = student_loss(&s, &[7, 8, 9, 10], 2.0).unwrap();
        let twice = b.tape.scale(b.loss, 2.0);
        let gb = b.tape.backward(twice).unwrap();
        for (n, m) in &ga {
            assert!(m.scale(2.0).max_abs_diff(&gb[n]) < 1e-15, "{n}");
        }
    }
}
