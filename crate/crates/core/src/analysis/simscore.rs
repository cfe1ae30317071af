use crate::error::{Error, Result};
use crate::model::HiddenTrace;
use crate::numerics::cosine_similarity;

/// Mean similarity of each layer input with all deeper layer inputs.
///
/// `scores[l]` belongs to the input of layer `l` (0-based) and averages over
/// the inputs of layers `l+1..L`, plus the final output when `include_final`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimScoreProfile {
    pub scores: Vec<f64>,
    pub include_final: bool,
}

/// Per-position mean cosine between two hidden-state matrices.
fn similarity(trace: &HiddenTrace, a: usize, b: usize) -> Result<f64> {
    let (xa, xb) = (&trace.states[a], &trace.states[b]);
    let mut sum = 0.0;
    for i in 0..xa.rows() {
        sum += cosine_similarity(xa.row(i), xb.row(i)).map_err(|e| match e {
            Error::ZeroVector { .. } => {
                Error::ZeroVector { context: Some(format!("position {i} of hidden state {a} or {b}")) }
            }
            other => other,
        })?;
    }
    Ok(sum / xa.rows() as f64)
}

pub fn sim_score(trace: &HiddenTrace, include_final: bool) -> Result<SimScoreProfile> {
    let layers = trace.num_layers();
    if layers < 2 {
        return Err(Error::Config(format!("similarity profile needs at least 2 layers, trace has {layers}")));
    }
    if trace.states.iter().any(|s| s.rows() == 0 || s.rows() != trace.states[0].rows()) {
        return Err(Error::shape("sim_score", "hidden states must share a non-zero row count"));
    }
    let last = if include_final { layers } else { layers - 1 };
    let mut scores = Vec::with_capacity(last);
    for l in 0..last {
        let mut total = 0.0;
        for j in l + 1..=last {
            total += similarity(trace, l, j)?;
        }
        scores.push(total / (last - l) as f64);
    }
    Ok(SimScoreProfile { scores, include_final })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, Precision};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_trace(layers: usize, n: usize, d: usize, seed: u64) -> HiddenTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HiddenTrace {
            states: (0..=layers)
                .map(|_| Matrix::from_fn(n, d, Precision::Double, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        }
    }

    #[test]
    fn identical_layers_score_one() {
        let t = random_trace(0, 5, 6, 1);
        let trace = HiddenTrace { states: vec![t.states[0].clone(); 6] };
        let p = sim_score(&trace, false).unwrap();
        assert_eq!(p.scores.len(), 4);
        assert!(p.scores.iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert_eq!(sim_score(&trace, true).unwrap().scores.len(), 5);
    }

    #[test]
    fn last_entry_is_single_pair() {
        let trace = random_trace(6, 4, 8, 2);
        let p = sim_score(&trace, false).unwrap();
        assert!((p.scores[4] - similarity(&trace, 4, 5).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let trace = random_trace(6, 7, 5, 3);
        for include_final in [false, true] {
            let p = sim_score(&trace, include_final).unwrap();
            let last = if include_final { 6 } else { 5 };
            for l in 0..last {
                let mut acc = 0.0;
                for j in l + 1..=last {
                    let mut s = 0.0;
                    for i in 0..7 {
                        let (a, b) = (trace.states[l].row(i), trace.states[j].row(i));
                        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                        s += dot / (na * nb);
                    }
                    acc += s / 7.0;
                }
                assert!((p.scores[l] - acc / (last - l) as f64).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_state_reports_position() {
        let mut trace = random_trace(3, 3, 4, 4);
        trace.states[2].row_mut(1).fill(0.0);
        let err = sim_score(&trace, false).unwrap_err();
        assert!(err.to_string().contains("position 1"), "{err}");
        let short = random_trace(1, 3, 4, 5);
        assert!(sim_score(&short, false).is_err());
    }
}
