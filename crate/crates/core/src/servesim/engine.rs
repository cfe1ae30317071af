//! The iteration-level event loop.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::analysis::flops::{flops_decode_token, flops_prefill_token, AttnContext};
use crate::error::Result;
use crate::kvcache::memory_bytes;

use super::{Arrival, EngineConfig, HardwareModel, InputLengths, WorkloadSpec};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RequestMetrics {
    pub id: usize,
    pub arrival: f64,
    pub first_token: f64,
    pub finish: f64,
    pub ttft: f64,
    /// Mean gap between output tokens after the first; 0 for single-token outputs.
    pub tpot: f64,
    pub input_tokens: usize,
    pub output_tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SimMetrics {
    /// Completed requests, by completion order.
    pub requests: Vec<RequestMetrics>,
    /// Ids of requests whose KV could never fit.
    pub rejected: Vec<usize>,
    /// From the first arrival to the last completion.
    pub makespan: f64,
    /// Input plus output tokens of completed requests per second of makespan.
    pub throughput: f64,
    /// `(time, waiting requests)` at the start of every iteration.
    pub queue_depth: Vec<(f64, usize)>,
    /// Peak KV bytes reserved at once.
    pub kv_high_water: u64,
    pub iterations: usize,
}

impl SimMetrics {
    fn mean(&self, f: impl Fn(&RequestMetrics) -> f64) -> f64 {
        if self.requests.is_empty() {
            return 0.0;
        }
        self.requests.iter().map(f).sum::<f64>() / self.requests.len() as f64
    }

    pub fn mean_ttft(&self) -> f64 {
        self.mean(|r| r.ttft)
    }

    pub fn mean_tpot(&self) -> f64 {
        self.mean(|r| r.tpot)
    }

    /// Every request was rejected (nothing could be served).
    pub fn infeasible(&self) -> bool {
        self.requests.is_empty() && !self.rejected.is_empty()
    }
}

/// Affine per-token costs: `flops(ctx) = base + per_ctx · ctx`.
struct CostModel {
    prefill_base: f64,
    prefill_per_ctx: f64,
    decode_base: f64,
    decode_per_ctx: f64,
}

impl CostModel {
    fn new(engine: &EngineConfig) -> Self {
        let (d, s) = (&engine.model, &engine.swiftkv);
        let p0 = flops_prefill_token(d, s, AttnContext::exact(0.0)).total;
        let p1 = flops_prefill_token(d, s, AttnContext::exact(1.0)).total;
        let d0 = flops_decode_token(d, s, 0.0).total;
        let d1 = flops_decode_token(d, s, 1.0).total;
        Self { prefill_base: p0, prefill_per_ctx: p1 - p0, decode_base: d0, decode_per_ctx: d1 - d0 }
    }

    fn decode(&self, context: usize) -> f64 {
        self.decode_base + self.decode_per_ctx * context as f64
    }

    /// Prompt tokens `start..end` of an `n`-token prompt. Token `i` attends to
    /// `i + 1` keys; the last prompt token walks every layer.
    fn prefill_chunk(&self, start: usize, end: usize, n: usize) -> f64 {
        let stop = end.min(n - 1);
        let mut flops = 0.0;
        if stop > start {
            let count = (stop - start) as f64;
            // Σ_{i=start}^{stop-1} (i + 1)
            let ctx_sum = (stop * (stop + 1) - start * (start + 1)) as f64 / 2.0;
            flops += count * self.prefill_base + self.prefill_per_ctx * ctx_sum;
        }
        if end == n {
            flops += self.decode(n);
        }
        flops
    }
}

struct Request {
    arrival: f64,
    input: usize,
    output: usize,
}

struct Active {
    id: usize,
    prefilled: usize,
    generated: usize,
    reserved: u64,
    first_token: f64,
}

fn draw_requests(workload: &WorkloadSpec) -> Vec<Request> {
    let mut arrivals = ChaCha8Rng::seed_from_u64(workload.seed);
    let mut lengths = ChaCha8Rng::seed_from_u64(workload.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut t = 0.0;
    (0..workload.num_requests)
        .map(|i| {
            let arrival = match workload.arrival {
                Arrival::Poisson { rate } => {
                    let gap: f64 = arrivals.sample(Exp1);
                    t += gap / rate;
                    t
                }
                // Filled in as slots free up.
                Arrival::ClosedLoop { concurrency } => {
                    if i < concurrency {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                }
            };
            let input = match &workload.input_length {
                InputLengths::Fixed(n) => *n,
                InputLengths::Empirical(v) => v[lengths.random_range(0..v.len())],
            };
            Request { arrival, input, output: workload.output_length }
        })
        .collect()
}

/// Simulates `workload` on `engine` and `hardware`. Deterministic for a given seed.
pub fn run_sim(workload: &WorkloadSpec, engine: &EngineConfig, hardware: &HardwareModel) -> Result<SimMetrics> {
    workload.validate()?;
    engine.validate()?;
    hardware.validate()?;
    let mut requests = draw_requests(workload);
    let closed_loop = matches!(workload.arrival, Arrival::ClosedLoop { .. });
    let mut next_release = match workload.arrival {
        Arrival::ClosedLoop { concurrency } => concurrency.min(requests.len()),
        Arrival::Poisson { .. } => requests.len(),
    };

    let cost = CostModel::new(engine);
    let geometry = engine.model.kv_geometry();
    let kv_bytes = |tokens: usize| memory_bytes(&engine.cache, geometry, &engine.swiftkv, tokens as u64);
    let param_bytes = engine.model.parameter_bytes() as f64;
    let kv_capacity = (hardware.memory_capacity - param_bytes).max(0.0);
    let compute_rate = hardware.peak_compute * hardware.efficiency;
    let byte_rate = hardware.peak_bandwidth * hardware.efficiency;

    let mut m = SimMetrics::default();
    let mut t = 0.0f64;
    let mut next_arrival = 0usize;
    let mut waiting: VecDeque<usize> = VecDeque::new();
    let mut running: Vec<Active> = Vec::new();
    let mut reserved = 0u64;
    let mut first_arrival = f64::INFINITY;
    let mut last_finish = 0.0f64;

    loop {
        // Arrivals are released in id order; closed-loop arrival times are set on release.
        while next_arrival < requests.len() && requests[next_arrival].arrival <= t {
            let id = next_arrival;
            next_arrival += 1;
            first_arrival = first_arrival.min(requests[id].arrival);
            let r = &requests[id];
            if kv_bytes(r.input + r.output) as f64 > kv_capacity {
                m.rejected.push(id);
                if closed_loop && next_release < requests.len() {
                    requests[next_release].arrival = t;
                    next_release += 1;
                }
            } else {
                waiting.push_back(id);
            }
        }
        while let Some(&id) = waiting.front() {
            let need = kv_bytes(requests[id].input + requests[id].output);
            if (reserved + need) as f64 > kv_capacity {
                break;
            }
            waiting.pop_front();
            reserved += need;
            m.kv_high_water = m.kv_high_water.max(reserved);
            running.push(Active { id, prefilled: 0, generated: 0, reserved: need, first_token: 0.0 });
        }
        if running.is_empty() {
            match requests.get(next_arrival) {
                Some(r) if r.arrival.is_finite() => {
                    t = t.max(r.arrival);
                    continue;
                }
                _ => break,
            }
        }

        m.queue_depth.push((t, waiting.len()));
        let mut flops = 0.0;
        let mut bytes = param_bytes;
        let mut decodes = Vec::new();
        for (slot, a) in running.iter().enumerate() {
            let r = &requests[a.id];
            if a.prefilled == r.input && a.generated < r.output {
                let context = r.input + a.generated;
                flops += cost.decode(context);
                bytes += kv_bytes(context) as f64;
                decodes.push(slot);
            }
        }
        let mut budget = engine.max_batched_tokens.saturating_sub(decodes.len());
        let mut chunks = Vec::new();
        for (slot, a) in running.iter().enumerate() {
            if budget == 0 {
                break;
            }
            let n = requests[a.id].input;
            if a.prefilled < n {
                let take = budget.min(n - a.prefilled);
                flops += cost.prefill_chunk(a.prefilled, a.prefilled + take, n);
                chunks.push((slot, take));
                budget -= take;
            }
        }
        let dt = (flops / compute_rate).max(bytes / byte_rate) + hardware.overhead;
        t += dt;
        m.iterations += 1;

        for slot in decodes {
            running[slot].generated += 1;
        }
        for (slot, take) in chunks {
            let a = &mut running[slot];
            a.prefilled += take;
            if a.prefilled == requests[a.id].input {
                a.generated = 1;
                a.first_token = t;
            }
        }
        let mut still = Vec::with_capacity(running.len());
        for a in running.drain(..) {
            let r = &requests[a.id];
            if a.generated < r.output {
                still.push(a);
                continue;
            }
            reserved -= a.reserved;
            last_finish = last_finish.max(t);
            let tpot = if r.output > 1 { (t - a.first_token) / (r.output - 1) as f64 } else { 0.0 };
            m.requests.push(RequestMetrics {
                id: a.id,
                arrival: r.arrival,
                first_token: a.first_token,
                finish: t,
                ttft: a.first_token - r.arrival,
                tpot,
                input_tokens: r.input,
                output_tokens: r.output,
            });
            if closed_loop && next_release < requests.len() {
                requests[next_release].arrival = t;
                next_release += 1;
            }
        }
        running = still;
    }

    if !m.requests.is_empty() {
        m.makespan = last_finish - first_arrival;
        let tokens: usize = m.requests.iter().map(|r| r.input_tokens + r.output_tokens).sum();
        m.throughput = if m.makespan > 0.0 { tokens as f64 / m.makespan } else { 0.0 };
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::flops::ModelDesc;
    use crate::swiftkv::SwiftKvConfig;

    fn unbounded() -> HardwareModel {
        HardwareModel { peak_bandwidth: f64::INFINITY, overhead: 0.0, memory_capacity: 1e15, ..HardwareModel::h100s(4) }
    }

    /// Token-by-token prefill cost of an `n`-token prompt.
    fn prefill_oracle(engine: &EngineConfig, n: usize) -> f64 {
        let (d, s) = (&engine.model, &engine.swiftkv);
        let mut total = 0.0;
        for i in 0..n - 1 {
            total += flops_prefill_token(d, s, AttnContext::exact((i + 1) as f64)).total;
        }
        total + flops_decode_token(d, s, n as f64).total
    }

    #[test]
    fn no_requests_no_time() {
        let w = WorkloadSpec::poisson(1.0, 100, 0, 0);
        let m = run_sim(&w, &EngineConfig::baseline(ModelDesc::llama3_8b()), &HardwareModel::h100()).unwrap();
        assert!(m.requests.is_empty() && m.rejected.is_empty());
        assert_eq!(m.makespan, 0.0);
        assert_eq!(m.iterations, 0);
    }

    #[test]
    fn single_request_ttft_is_prefill_flops_over_compute() {
        for swift in [SwiftKvConfig::baseline(80), SwiftKvConfig::from_fraction(80, 0.5, 4)] {
            let engine = EngineConfig::new(ModelDesc::llama3_70b(), swift);
            let hw = unbounded();
            let mut w = WorkloadSpec::poisson(1.0, 2048, 1, 3);
            w.output_length = 1;
            let m = run_sim(&w, &engine, &hw).unwrap();
            let expect = prefill_oracle(&engine, 2048) / (hw.peak_compute * hw.efficiency);
            let got = m.requests[0].ttft;
            assert!((got - expect).abs() <= 1e-12 * expect, "{got} vs {expect}");
        }
    }

    #[test]
    fn chunked_cost_equals_token_sum() {
        let engine = EngineConfig::new(ModelDesc::llama3_8b(), SwiftKvConfig::from_fraction(32, 0.5, 1));
        let cost = CostModel::new(&engine);
        let n = 5000;
        let chunked: f64 =
            [(0, 2048), (2048, 4096), (4096, 5000)].iter().map(|&(a, b)| cost.prefill_chunk(a, b, n)).sum();
        let oracle = prefill_oracle(&engine, n);
        assert!((chunked - oracle).abs() <= 1e-9 * oracle);
    }

    #[test]
    fn tokens_are_conserved_and_runs_repeat() {
        let w = WorkloadSpec {
            input_length: InputLengths::Empirical(vec![100, 3000, 700]),
            output_length: 17,
            ..WorkloadSpec::poisson(3.0, 1, 40, 5)
        };
        let engine = EngineConfig::baseline(ModelDesc::llama3_8b());
        let a = run_sim(&w, &engine, &HardwareModel::h100()).unwrap();
        assert_eq!(a, run_sim(&w, &engine, &HardwareModel::h100()).unwrap());
        assert_eq!(a.requests.len(), 40);
        let mut ids: Vec<usize> = a.requests.iter().map(|r| r.id).collect();
        ids.sort();
        assert_eq!(ids, (0..40).collect::<Vec<_>>());
        for r in &a.requests {
            assert!(r.ttft > 0.0 && r.tpot > 0.0 && r.finish >= r.first_token);
        }
        let tokens: usize = a.requests.iter().map(|r| r.input_tokens + r.output_tokens).sum();
        assert!((a.throughput - tokens as f64 / a.makespan).abs() < 1e-9 * a.throughput);
    }

    #[test]
    fn oversized_requests_are_rejected_not_dropped() {
        let desc = ModelDesc::llama3_8b();
        let hw = HardwareModel::h100().with_memory(desc.parameter_bytes() as f64 + 1e9);
        let w = WorkloadSpec {
            input_length: InputLengths::Empirical(vec![1000, 100_000]),
            ..WorkloadSpec::closed_loop(4, 1, 30, 2)
        };
        let m = run_sim(&w, &EngineConfig::baseline(desc), &hw).unwrap();
        assert!(!m.rejected.is_empty());
        assert_eq!(m.rejected.len() + m.requests.len(), 30);
        assert!(m.requests.iter().all(|r| r.input_tokens == 1000));
        assert!(m.kv_high_water as f64 <= 1e9);
    }

    #[test]
    fn closed_loop_caps_in_flight_requests() {
        let w = WorkloadSpec::closed_loop(3, 500, 12, 0);
        let m = run_sim(&w, &EngineConfig::baseline(ModelDesc::llama3_8b()), &HardwareModel::h100()).unwrap();
        assert_eq!(m.requests.len(), 12);
        for r in &m.requests {
            let in_flight = m.requests.iter().filter(|o| o.arrival <= r.arrival && o.finish > r.arrival).count();
            assert!(in_flight <= 3);
        }
        assert!(m.queue_depth.iter().all(|&(_, q)| q <= 3));
    }
}
