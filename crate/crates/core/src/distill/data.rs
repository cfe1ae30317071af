//! Seeded synthetic corpora from an order-1 Markov chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Successors that carry most of each row's mass.
const PREFERRED: usize = 4;
/// Mass spread uniformly over the whole vocabulary.
const BACKGROUND: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    /// Row-stochastic `vocab × vocab` transition matrix.
    pub transitions: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(vocab: usize, rng: &mut impl Rng) -> Self {
        let transitions = (0..vocab)
            .map(|_| {
                let mut row = vec![BACKGROUND / vocab as f64; vocab];
                let weights: Vec<(usize, f64)> = (0..PREFERRED.min(vocab))
                    .map(|_| (rng.random_range(0..vocab), rng.random_range(0.2..1.0)))
                    .collect();
                let total: f64 = weights.iter().map(|w| w.1).sum();
                for (t, w) in weights {
                    row[t] += (1.0 - BACKGROUND) * w / total;
                }
                row
            })
            .collect();
        Self { transitions }
    }

    pub fn vocab(&self) -> usize {
        self.transitions.len()
    }

    fn next(&self, from: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let row = &self.transitions[from];
        let mut acc = 0.0;
        for (t, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return t;
            }
        }
        row.len() - 1
    }

    pub fn sample(&self, length: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(length);
        if length == 0 {
            return out;
        }
        out.push(rng.random_range(0..self.vocab()));
        while out.len() < length {
            let t = self.next(*out.last().expect("non-empty"), rng);
            out.push(t);
        }
        out
    }
}

/// `count` sequences of `length` tokens. The chain and the samples share one seeded stream.
pub fn synth_dataset(vocab: usize, count: usize, length: usize, seed: u64) -> Vec<Vec<usize>> {
    if vocab == 0 {
        return vec![Vec::new(); count];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = MarkovChain::new(vocab, &mut rng);
    (0..count).map(|_| chain.sample(length, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_dataset(50, 20, 17, 9);
        assert_eq!(a, synth_dataset(50, 20, 17, 9));
        assert_ne!(a, synth_dataset(50, 20, 17, 10));
        assert!(a.iter().all(|s| s.len() == 17 && s.iter().all(|&t| t < 50)));
    }

    #[test]
    fn rows_are_stochastic() {
        let chain = MarkovChain::new(30, &mut ChaCha8Rng::seed_from_u64(1));
        for row in &chain.transitions {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn bigram_counts_approach_transitions() {
        let vocab = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chain = MarkovChain::new(vocab, &mut rng);
        let seq = chain.sample(10_000, &mut rng);
        let mut counts = vec![vec![0usize; vocab]; vocab];
        for w in seq.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
        let total: usize = counts.iter().flatten().sum();
        let mut weighted = 0.0;
        for (a, row) in counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            if n == 0 {
                continue;
            }
            let tv: f64 =
                row.iter().zip(&chain.transitions[a]).map(|(&c, p)| (c as f64 / n as f64 - p).abs()).sum::<f64>() / 2.0;
            weighted += tv * n as f64 / total as f64;
        }
        assert!(weighted <= 0.1, "total variation {weighted}");
    }
}
