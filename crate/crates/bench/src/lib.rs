//! Shared fixtures for the criterion benches.

use swiftkv_core::model::{init_random, ModelConfig, Parameters};

pub fn toy_params(seed: u64) -> Parameters {
    init_random(&ModelConfig::toy(), seed).expect("toy config is valid")
}

pub fn prompt(len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|i| (i * 7919 + 13) % vocab).collect()
}
