//! Simulator behaviour across load levels.

use swiftkv_core::analysis::ModelDesc;
use swiftkv_core::servesim::{sweep_arrival, EngineConfig, HardwareModel, WorkloadSpec};
use swiftkv_core::SwiftKvConfig;

#[test]
fn swiftkv_decode_is_never_slower_once_loaded() {
    let desc = ModelDesc::llama3_70b();
    let base = EngineConfig::baseline(desc.clone());
    let swift = EngineConfig::new(desc.clone(), SwiftKvConfig::from_fraction(desc.num_layers, 0.5, 1));
    let hw = HardwareModel::h100s(4);
    let template = WorkloadSpec::poisson(1.0, 8_000, 120, 9);
    let rates = [0.1, 0.3, 0.6, 1.0, 1.5];
    let b = sweep_arrival(&template, &rates, &base, &hw).unwrap();
    let s = sweep_arrival(&template, &rates, &swift, &hw).unwrap();
    for ((rate, bm), (_, sm)) in b.iter().zip(&s).skip(1) {
        assert!(
            sm.mean_tpot() <= bm.mean_tpot() * (1.0 + 1e-9),
            "rate {rate}: swiftkv tpot {} > baseline {}",
            sm.mean_tpot(),
            bm.mean_tpot()
        );
        assert!(sm.mean_ttft() <= bm.mean_ttft(), "rate {rate}: ttft regressed");
    }
}

#[test]
fn every_admitted_request_completes_in_order_of_events() {
    let desc = ModelDesc::llama3_8b();
    let engine = EngineConfig::new(desc.clone(), SwiftKvConfig::from_fraction(desc.num_layers, 0.5, 4));
    let w = WorkloadSpec::poisson(4.0, 1_500, 80, 2);
    let m = swiftkv_core::servesim::run_sim(&w, &engine, &HardwareModel::h100()).unwrap();
    assert_eq!(m.requests.len() + m.rejected.len(), 80);
    for r in &m.requests {
        assert!(r.arrival <= r.first_token && r.first_token <= r.finish);
        assert!((r.ttft - (r.first_token - r.arrival)).abs() < 1e-12);
        assert_eq!(r.output_tokens, w.output_length);
    }
}
