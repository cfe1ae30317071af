//! The distillation loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::swiftkv::{rewire_with_scope, StudentParameters, SwiftKvConfig, TrainScope};

use super::forward::{student_loss, untaped_loss};
use super::optim::{optimizer_step, TrainState};
use super::tape::Gradients;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub temperature: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Longer sequences are truncated.
    pub max_seq_len: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.05,
            warmup_fraction: 0.05,
            epochs: 2,
            temperature: 2.0,
            batch_size: 8,
            max_seq_len: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train: {what}")));
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_seq_len == 0 {
            return bad("epochs, batch_size and max_seq_len must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean batch loss before the update.
    pub loss: f64,
}

fn truncate(seq: &[usize], max: usize) -> &[usize] {
    &seq[..seq.len().min(max)]
}

/// Mean loss and mean gradients over a batch of sequences.
pub fn batch_gradients(student: &StudentParameters, batch: &[&[usize]], temperature: f64) -> Result<(f64, Gradients)> {
    let mut total = 0.0;
    let mut sum = Gradients::new();
    for seq in batch {
        let mut st = student_loss(student, seq, temperature)?;
        total += st.tape.value(st.loss).get(0, 0);
        for (name, g) in st.tape.backward(st.loss)? {
            match sum.get_mut(&name) {
                Some(acc) => *acc = acc.add(&g)?,
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    let n = batch.len().max(1) as f64;
    for g in sum.values_mut() {
        *g = g.scale(1.0 / n);
    }
    Ok((total / n, sum))
}

/// Distils `student` toward its own frozen base. Sequences are reshuffled each
/// epoch from `config.seed`; the last batch of an epoch may be short.
pub fn train(student: &mut StudentParameters, dataset: &[Vec<usize>], config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let per_epoch = dataset.len().div_ceil(config.batch_size);
    let mut state = TrainState::new(student, per_epoch * config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| truncate(&dataset[i], config.max_seq_len)).collect();
            let (loss, grads) = batch_gradients(student, &batch, config.temperature)?;
            let step = state.step;
            let lr = optimizer_step(&mut state, student, &grads, config)?;
            state.history.push(LossRecord { step, lr, loss });
        }
    }
    Ok(state)
}

/// Mean loss over the whole dataset, without touching the parameters.
pub fn evaluate(student: &StudentParameters, dataset: &[Vec<usize>], config: &TrainConfig) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for seq in dataset {
        total += untaped_loss(student, truncate(seq, config.max_seq_len), config.temperature)?;
    }
    Ok(total / dataset.len() as f64)
}

/// One arm of the partial-versus-full training comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub scope: TrainScope,
    pub trainable_parameters: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub state: TrainState,
    pub student: StudentParameters,
}

/// Trains a fresh student from `teacher` under each scope with identical data and settings.
pub fn ablation(
    teacher: &Parameters,
    swift: &SwiftKvConfig,
    dataset: &[Vec<usize>],
    config: &TrainConfig,
) -> Result<Vec<AblationRun>> {
    [TrainScope::Qkv, TrainScope::FullLayers]
        .into_iter()
        .map(|scope| {
            let mut student = rewire_with_scope(teacher, swift, scope)?;
            let initial_loss = evaluate(&student, dataset, config)?;
            let state = train(&mut student, dataset, config)?;
            Ok(AblationRun {
                scope,
                trainable_parameters: student.trainable_parameter_count(),
                initial_loss,
                final_loss: evaluate(&student, dataset, config)?,
                state,
                student,
            })
        })
        .collect()
}

/// Loss curves side by side: `step,lr,<scope>...`.
pub fn render_ablation_csv(runs: &[AblationRun]) -> String {
    let mut out = String::from("step,lr");
    for r in runs {
        out.push_str(&format!(",loss_{}", scope_label(r.scope)));
    }
    out.push('\n');
    let steps = runs.iter().map(|r| r.state.history.len()).max().unwrap_or(0);
    for i in 0..steps {
        let first = runs.iter().find_map(|r| r.state.history.get(i));
        let (step, lr) = first.map_or((i, 0.0), |h| (h.step, h.lr));
        out.push_str(&format!("{step},{lr:e}"));
        for r in runs {
            match r.state.history.get(i) {
                Some(h) => out.push_str(&format!(",{:.10}", h.loss)),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn scope_label(scope: TrainScope) -> &'static str {
    match scope {
        TrainScope::Qkv => "qkv",
        TrainScope::FullLayers => "full_layers",
    }
}

pub fn render_history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in history {
        out.push_str(&format!("{},{:e},{:.10}\n", r.step, r.lr, r.loss));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::synth_dataset;
    use crate::model::{init_random, ModelConfig};
    use crate::swiftkv::{rewire, SwiftKvConfig};

    fn small() -> ModelConfig {
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
    fn zero_rate_leaves_student_unchanged_and_loss_flat() {
        let params = init_random(&small(), 1).unwrap();
        let mut s = rewire(&params, &SwiftKvConfig::new(2, 1)).unwrap();
        let before = s.clone();
        let data = synth_dataset(32, 6, 8, 2);
        let cfg = TrainConfig { learning_rate: 0.0, batch_size: 6, epochs: 3, ..TrainConfig::default() };
        let state = train(&mut s, &data, &cfg).unwrap();
        assert_eq!(s, before);
        assert_eq!(state.history.len(), 3);
        assert!(state.history.iter().all(|r| (r.loss - state.history[0].loss).abs() < 1e-12));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let params = init_random(&small(), 3).unwrap();
        let data = synth_dataset(32, 24, 12, 4);
        let cfg = TrainConfig { learning_rate: 1e-2, batch_size: 4, epochs: 2, seed: 7, ..TrainConfig::default() };
        let run = || {
            let mut s = rewire(&params, &SwiftKvConfig::new(2, 1)).unwrap();
            let before = evaluate(&s, &data, &cfg).unwrap();
            let state = train(&mut s, &data, &cfg).unwrap();
            (before, evaluate(&s, &data, &cfg).unwrap(), state.history, s)
        };
        let (b1, a1, h1, s1) = run();
        let (_, _, h2, s2) = run();
        assert_eq!(h1, h2);
        assert_eq!(s1, s2);
        assert!(a1 < b1, "{a1} !< {b1}");
        assert_eq!(s1.base, params);
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let h = [LossRecord { step: 0, lr: 1e-3, loss: 0.5 }];
        let csv = render_history_csv(&h);
        assert!(csv.starts_with("step,lr,loss\n0,"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn ablation_arms_share_schedule() {
        let params = init_random(&small(), 8).unwrap();
        let data = synth_dataset(32, 8, 8, 1);
        let cfg = TrainConfig { learning_rate: 1e-2, batch_size: 4, epochs: 1, ..TrainConfig::default() };
        let runs = ablation(&params, &SwiftKvConfig::new(2, 1), &data, &cfg).unwrap();
        assert_eq!(runs.len(), 2);
        assert!(runs[1].trainable_parameters > runs[0].trainable_parameters);
        let csv = render_ablation_csv(&runs);
        assert!(csv.starts_with("step,lr,loss_qkv,loss_full_layers\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
