//! Chunked-prefill serving simulator with a roofline cost model.
//!
//! Each iteration runs every active decode token plus prefill chunks up to a
//! token budget. Its duration is the larger of compute time and weight/KV
//! read time, plus a fixed overhead. Requests reserve their whole KV footprint
//! on admission and release it on completion.

mod engine;
mod study;

use serde::{Deserialize, Serialize};

use crate::analysis::flops::ModelDesc;
use crate::error::{Error, Result};
use crate::kvcache::CacheConfig;
use crate::swiftkv::SwiftKvConfig;

pub use engine::{run_sim, RequestMetrics, SimMetrics};
pub use study::{knee_rate, memory_study, sweep_arrival, MemoryStudyRow, MemoryVariant, KNEE_FACTOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareModel {
    /// Flops per second.
    pub peak_compute: f64,
    /// Bytes per second.
    pub peak_bandwidth: f64,
    /// Bytes available for weights and KV.
    pub memory_capacity: f64,
    /// Fixed cost per iteration, seconds.
    pub overhead: f64,
    /// Fraction of both peaks actually achieved.
    pub efficiency: f64,
}

impl Default for HardwareModel {
    fn default() -> Self {
        Self::h100()
    }
}

fn default_overhead() -> f64 {
    1e-3
}

fn default_efficiency() -> f64 {
    0.5
}

impl HardwareModel {
    /// One 80 GB H100 (dense BF16 peak, HBM3 bandwidth).
    pub fn h100() -> Self {
        Self::h100s(1)
    }

    /// `n` H100s treated as one device with summed peaks and memory.
    pub fn h100s(n: usize) -> Self {
        let n = n as f64;
        Self {
            peak_compute: 989e12 * n,
            peak_bandwidth: 3.35e12 * n,
            memory_capacity: 80e9 * n,
            overhead: default_overhead(),
            efficiency: default_efficiency(),
        }
    }

    pub fn with_memory(mut self, bytes: f64) -> Self {
        self.memory_capacity = bytes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.peak_compute, self.peak_bandwidth, self.memory_capacity];
        if positive.iter().any(|x| !(*x > 0.0)) || !(self.overhead >= 0.0) {
            return Err(Error::Config("hardware: peaks and capacity must be positive, overhead non-negative".into()));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::Config(format!("hardware: efficiency {} outside (0, 1]", self.efficiency)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Arrival {
    /// Poisson arrivals, requests per second.
    Poisson { rate: f64 },
    /// A fixed number of requests in flight; each completion releases the next.
    ClosedLoop { concurrency: usize },
}

/// A bare integer in config files, or a list to draw from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputLengths {
    Fixed(usize),
    /// Drawn uniformly from the list.
    Empirical(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub arrival: Arrival,
    pub input_length: InputLengths,
    pub output_length: usize,
    pub num_requests: usize,
    pub seed: u64,
}

fn default_output_length() -> usize {
    256
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self::poisson(1.0, 2048, 100, 0)
    }
}

impl WorkloadSpec {
    pub fn poisson(rate: f64, input_length: usize, num_requests: usize, seed: u64) -> Self {
        Self {
            arrival: Arrival::Poisson { rate },
            input_length: InputLengths::Fixed(input_length),
            output_length: default_output_length(),
            num_requests,
            seed,
        }
    }

    pub fn closed_loop(concurrency: usize, input_length: usize, num_requests: usize, seed: u64) -> Self {
        Self {
            arrival: Arrival::ClosedLoop { concurrency },
            input_length: InputLengths::Fixed(input_length),
            output_length: default_output_length(),
            num_requests,
            seed,
        }
    }

    pub fn with_rate(&self, rate: f64) -> Self {
        Self { arrival: Arrival::Poisson { rate }, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("workload: {m}")));
        match &self.arrival {
            Arrival::Poisson { rate } if !(*rate > 0.0) => return bad(format!("rate {rate} must be positive")),
            Arrival::ClosedLoop { concurrency: 0 } => return bad("concurrency must be positive".into()),
            _ => {}
        }
        match &self.input_length {
            InputLengths::Fixed(0) => return bad("input length must be at least 1".into()),
            InputLengths::Empirical(v) if v.is_empty() || v.contains(&0) => {
                return bad("empirical input lengths must be non-empty and at least 1".into())
            }
            _ => {}
        }
        if self.output_length == 0 {
            return bad("output length must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Token budget per iteration, decode tokens included.
    pub max_batched_tokens: usize,
    pub model: ModelDesc,
    pub swiftkv: SwiftKvConfig,
    pub cache: CacheConfig,
}

impl EngineConfig {
    pub fn new(model: ModelDesc, swiftkv: SwiftKvConfig) -> Self {
        Self { max_batched_tokens: 2048, model, swiftkv, cache: CacheConfig::default() }
    }

    pub fn baseline(model: ModelDesc) -> Self {
        let l = model.num_layers;
        Self::new(model, SwiftKvConfig::baseline(l))
    }

    pub fn with_cache(mut self, cache: CacheConfig) -> Self {
        self.cache = cache;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_batched_tokens == 0 {
            return Err(Error::Config("engine: max_batched_tokens must be at least 1".into()));
        }
        self.swiftkv.validate(self.model.num_layers)
    }
}
