//! Prefill and decode on the toy model: baseline against SwiftKV skip-prefill.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use swiftkv_bench::{prompt, toy_params};
use swiftkv_core::model::forward_cached;
use swiftkv_core::swiftkv::{decode_step_skip, prefill_skip, rewire};
use swiftkv_core::{CacheConfig, SwiftKvConfig};

fn prefill(c: &mut Criterion) {
    let params = toy_params(1);
    let layers = params.config.num_layers;
    let cache = CacheConfig::default();
    let mut group = c.benchmark_group("prefill");
    for len in [32, 128] {
        let tokens = prompt(len, params.config.vocab_size);
        group.bench_with_input(BenchmarkId::new("baseline", len), &tokens, |b, t| {
            b.iter(|| {
                let mut kv = params.new_cache(&cache);
                black_box(forward_cached(&params, t, 0, &mut kv).unwrap())
            })
        });
        for group_size in [1, 4] {
            let student = rewire(&params, &SwiftKvConfig::new(layers / 2, group_size)).unwrap();
            group.bench_with_input(BenchmarkId::new(format!("swiftkv50_g{group_size}"), len), &tokens, |b, t| {
                b.iter(|| {
                    let mut kv = student.new_cache(&cache);
                    black_box(prefill_skip(&student, t, &mut kv).unwrap())
                })
            });
        }
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let params = toy_params(2);
    let student = rewire(&params, &SwiftKvConfig::new(params.config.num_layers / 2, 1)).unwrap();
    let tokens = prompt(64, params.config.vocab_size);
    let mut kv = student.new_cache(&CacheConfig::default());
    prefill_skip(&student, &tokens, &mut kv).unwrap();
    c.bench_function("decode_step_ctx64", |b| {
        b.iter_batched(
            || kv.clone(),
            |mut kv| black_box(decode_step_skip(&student, 5, tokens.len(), &mut kv).unwrap()),
            criterion::BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, prefill, decode);
criterion_main!(benches);
