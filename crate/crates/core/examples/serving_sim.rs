//! Decode serving with FCFS admission over a shared fast pool.
//!
//! Eight requests with Poisson arrivals decode four tokens each. The pool is
//! sized so only some requests are live at once; the report shows admission
//! order, pool reservation headroom, TBT percentiles and cache behaviour for
//! exact attention, PSA and top-k.
//!
//! ```bash
//! cargo run -p psa --example serving_sim
//! ```

use psa::serving::{run_serving, AttentionMethod, BatchingConfig};
use psa::workload::{generate_workload, ContextDist, WorkloadSpec};
use psa::{PsaConfig, StoreConfig};

pub fn run_example() -> psa::Result<()> {
    let spec = WorkloadSpec {
        n_requests: 8,
        n_layers: 2,
        context: ContextDist::Uniform { min: 512, max: 1024 },
        decode_steps: 4,
        arrival_rate: 200.0,
        seed: 9,
        ..WorkloadSpec::default()
    };
    let requests = generate_workload(&spec)?;
    let store = StoreConfig {
        fast_capacity_slots: 24,
        n_layers: spec.n_layers,
        ..StoreConfig::default()
    };
    let engine = PsaConfig {
        audit: true,
        ..PsaConfig::default()
    };
    let batching = BatchingConfig::default();

    for method in [AttentionMethod::Exact, AttentionMethod::Psa, AttentionMethod::TopK(8)] {
        let r = run_serving(&requests, method, &engine, &store, &batching)?;
        println!("{method:?}");
        println!("  admission order {:?}", r.admission_order);
        println!("  max reserved slots {} of {}", r.max_reserved_slots, store.fast_capacity_slots);
        println!("  TBT p50 {:.3} ms, p99 {:.3} ms", r.tbt_ms.p50, r.tbt_ms.p99);
        println!(
            "  kv fraction {:.3}, min coverage {:.4}, hit ratio {:.3}",
            r.kv_fraction,
            r.min_true_coverage.unwrap_or(f64::NAN),
            r.hit_ratio
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
