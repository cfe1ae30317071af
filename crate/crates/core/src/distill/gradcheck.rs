//! Tape gradients against central differences of the untaped loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::swiftkv::StudentParameters;

use super::forward::{student_loss, untaped_loss};

/// Denominator floor so coordinates with vanishing gradients are judged absolutely.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub samples: Vec<GradCheckSample>,
    pub max_rel_err: f64,
}

fn perturbed(student: &StudentParameters, tensor: &str, index: usize, delta: f64) -> StudentParameters {
    let mut s = student.clone();
    s.visit_trainable_mut(|name, m| {
        if name == tensor {
            m.data_mut()[index] += delta;
        }
    });
    s
}

/// Checks `count` coordinates, cycling through the trainable tensors in order
/// and picking a random entry of each.
pub fn gradcheck(
    student: &StudentParameters,
    tokens: &[usize],
    temperature: f64,
    count: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut st = student_loss(student, tokens, temperature)?;
    let grads = st.tape.backward(st.loss)?;
    let tensors: Vec<(String, usize)> =
        student.trainable_tensors().into_iter().map(|(n, m)| (n, m.rows() * m.cols())).collect();
    if tensors.is_empty() {
        return Err(Error::Config("gradcheck: student has no trainable tensors".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let (name, len) = &tensors[i % tensors.len()];
        let index = rng.random_range(0..*len);
        let plus = untaped_loss(&perturbed(student, name, index, step), tokens, temperature)?;
        let minus = untaped_loss(&perturbed(student, name, index, -step), tokens, temperature)?;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads[name].data()[index];
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        samples.push(GradCheckSample { tensor: name.clone(), index, analytic, numeric, rel_err });
    }
    let max_rel_err = samples.iter().map(|s| s.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { samples, max_rel_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_random, ModelConfig};
    use crate::swiftkv::{rewire_with_scope, SwiftKvConfig, TrainScope};

    #[test]
    fn full_layer_scope_passes() {
        let cfg = ModelConfig {
            num_layers: 4,
            d_model: 16,
            num_heads: 4,
            num_kv_heads: 2,
            head_dim: 4,
            d_ff: 24,
            vocab_size: 32,
            ..ModelConfig::toy()
        };
        let params = init_random(&cfg, 11).unwrap();
        let s = rewire_with_scope(&params, &SwiftKvConfig::new(2, 2).with_early_exit(0.95), TrainScope::FullLayers)
            .unwrap();
        let report = gradcheck(&s, &[4, 8, 15, 16, 23, 31], 2.0, 60, 1e-5, 1).unwrap();
        assert_eq!(report.samples.len(), 60);
        assert!(
            report.max_rel_err <= 1e-4,
            "{:?}",
            report.samples.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        );
        let mut seen: Vec<&str> = report.samples.iter().map(|s| s.tensor.as_str()).collect();
        seen.dedup();
        assert!(seen.iter().any(|n| n.ends_with("w_down")) && seen.contains(&"exit_head"));
    }
}
