//! Simulator throughput: events per second matter for wide rate sweeps.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use swiftkv_core::analysis::ModelDesc;
use swiftkv_core::servesim::{run_sim, EngineConfig, HardwareModel, WorkloadSpec};
use swiftkv_core::SwiftKvConfig;

fn simulate(c: &mut Criterion) {
    let desc = ModelDesc::llama3_70b();
    let swift = EngineConfig::new(desc.clone(), SwiftKvConfig::from_fraction(desc.num_layers, 0.5, 1));
    let hw = HardwareModel::h100s(4);
    let poisson = WorkloadSpec::poisson(0.5, 8_000, 200, 1);
    let closed = WorkloadSpec::closed_loop(64, 2_000, 256, 1);
    c.bench_function("poisson_200x8k", |b| b.iter(|| black_box(run_sim(&poisson, &swift, &hw).unwrap())));
    c.bench_function("closed_loop_256x2k", |b| b.iter(|| black_box(run_sim(&closed, &swift, &hw).unwrap())));
}

criterion_group!(benches, simulate);
criterion_main!(benches);
