//! Arrival-rate sweeps and the compute-versus-memory study.

use serde::Serialize;

use crate::analysis::flops::ModelDesc;
use crate::error::Result;
use crate::kvcache::{AccountingMode, CacheConfig, Quantization};
use crate::swiftkv::SwiftKvConfig;

use super::{run_sim, EngineConfig, HardwareModel, SimMetrics, WorkloadSpec};

/// Mean TTFT above this multiple of the zero-load TTFT marks saturation.
pub const KNEE_FACTOR: f64 = 10.0;

/// Runs `template` at each Poisson rate with the same seed.
pub fn sweep_arrival(
    template: &WorkloadSpec,
    rates: &[f64],
    engine: &EngineConfig,
    hardware: &HardwareModel,
) -> Result<Vec<(f64, SimMetrics)>> {
    rates.iter().map(|&r| Ok((r, run_sim(&template.with_rate(r), engine, hardware)?))).collect()
}

/// First rate of the sweep whose mean TTFT exceeds [`KNEE_FACTOR`] times the
/// TTFT of a lone request. `None` if the sweep never saturates.
pub fn knee_rate(
    template: &WorkloadSpec,
    rates: &[f64],
    engine: &EngineConfig,
    hardware: &HardwareModel,
) -> Result<Option<f64>> {
    let lone = WorkloadSpec { num_requests: 1, ..template.with_rate(1.0) };
    let zero_load = run_sim(&lone, engine, hardware)?.mean_ttft();
    let sweep = sweep_arrival(template, rates, engine, hardware)?;
    Ok(sweep.into_iter().find(|(_, m)| m.mean_ttft() > KNEE_FACTOR * zero_load).map(|(r, _)| r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryVariant {
    Baseline,
    /// Baseline compute with a single layer's worth of KV memory.
    MergeAllLayers,
    SwiftKv50,
    SwiftKv50AcrossKv4,
    SwiftKv50AcrossKv4Fp8,
}

impl MemoryVariant {
    pub const ALL: [MemoryVariant; 5] = [
        MemoryVariant::Baseline,
        MemoryVariant::MergeAllLayers,
        MemoryVariant::SwiftKv50,
        MemoryVariant::SwiftKv50AcrossKv4,
        MemoryVariant::SwiftKv50AcrossKv4Fp8,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MemoryVariant::Baseline => "baseline",
            MemoryVariant::MergeAllLayers => "merge_all_layers",
            MemoryVariant::SwiftKv50 => "swiftkv50",
            MemoryVariant::SwiftKv50AcrossKv4 => "swiftkv50_acrosskv4",
            MemoryVariant::SwiftKv50AcrossKv4Fp8 => "swiftkv50_acrosskv4_fp8",
        }
    }

    pub fn engine(self, model: &ModelDesc) -> EngineConfig {
        let l = model.num_layers;
        let (swift, cache) = match self {
            MemoryVariant::Baseline => (SwiftKvConfig::baseline(l), CacheConfig::default()),
            MemoryVariant::MergeAllLayers => (
                SwiftKvConfig::baseline(l),
                CacheConfig { accounting: AccountingMode::MergeAllLayers, ..CacheConfig::default() },
            ),
            MemoryVariant::SwiftKv50 => (SwiftKvConfig::from_fraction(l, 0.5, 1), CacheConfig::default()),
            MemoryVariant::SwiftKv50AcrossKv4 => (SwiftKvConfig::from_fraction(l, 0.5, 4), CacheConfig::default()),
            MemoryVariant::SwiftKv50AcrossKv4Fp8 => (
                SwiftKvConfig::from_fraction(l, 0.5, 4),
                CacheConfig { quantization: Quantization::Fp8PerToken, ..CacheConfig::default() },
            ),
        };
        EngineConfig::new(model.clone(), swift).with_cache(cache)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryStudyRow {
    /// Bytes.
    pub capacity: f64,
    pub variant: MemoryVariant,
    /// Tokens per second; `None` when nothing could be served.
    pub throughput: Option<f64>,
    pub rejected: usize,
    pub kv_high_water: u64,
}

/// Every variant at every capacity on the same workload.
pub fn memory_study(
    model: &ModelDesc,
    hardware: &HardwareModel,
    capacities: &[f64],
    workload: &WorkloadSpec,
) -> Result<Vec<MemoryStudyRow>> {
    let mut rows = Vec::new();
    for &capacity in capacities {
        let hw = hardware.clone().with_memory(capacity);
        for variant in MemoryVariant::ALL {
            let m = run_sim(workload, &variant.engine(model), &hw)?;
            rows.push(MemoryStudyRow {
                capacity,
                variant,
                throughput: (!m.requests.is_empty()).then_some(m.throughput),
                rejected: m.rejected.len(),
                kv_high_water: m.kv_high_water,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn below_parameter_bytes_everything_is_infeasible() {
        let model = ModelDesc::llama3_8b();
        let cap = model.parameter_bytes() as f64 * 0.9;
        let rows =
            memory_study(&model, &HardwareModel::h100(), &[cap], &WorkloadSpec::closed_loop(4, 512, 8, 0)).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.throughput.is_none() && r.rejected == 8));
    }

    #[test]
    fn ttft_grows_with_rate() {
        let engine = EngineConfig::baseline(ModelDesc::llama3_8b());
        let rates = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
        let sweep =
            sweep_arrival(&WorkloadSpec::poisson(1.0, 4096, 60, 9), &rates, &engine, &HardwareModel::h100()).unwrap();
        for w in sweep.windows(2) {
            assert!(w[1].1.mean_ttft() >= w[0].1.mean_ttft(), "{} -> {}", w[0].0, w[1].0);
        }
    }

    #[test]
    fn slow_arrivals_approach_lone_ttft() {
        let engine = EngineConfig::baseline(ModelDesc::llama3_8b());
        let hw = HardwareModel::h100();
        let lone = run_sim(&WorkloadSpec::poisson(1.0, 2048, 1, 0), &engine, &hw).unwrap().mean_ttft();
        let slow = run_sim(&WorkloadSpec::poisson(1e-3, 2048, 20, 0), &engine, &hw).unwrap().mean_ttft();
        assert!((slow - lone).abs() < 1e-9);
    }
}
