//! Progressive attention against the exact double-precision oracle.
//!
//! One 4096-token context (128 blocks of 32) with concentrated attention.
//! Sweeping epsilon shows how many blocks PSA touches, the coverage it
//! actually achieves, and the output error relative to exact attention.
//!
//! ```bash
//! cargo run -p psa --example exact_vs_progressive
//! ```

use psa::attention::max_relative_error;
use psa::workload::{generate_workload, ContextDist, PlantedDist, WorkloadSpec};
use psa::{exact_attention_blocks, psa_attention, PsaConfig, StoreConfig, TieredBlockStore};

pub fn run_example() -> psa::Result<()> {
    let spec = WorkloadSpec {
        n_requests: 1,
        n_layers: 1,
        context: ContextDist::Fixed(4096),
        decode_steps: 1,
        skew_min: 6.0,
        skew_max: 6.0,
        planted: PlantedDist::Choices(vec![12]),
        seed: 1,
        ..WorkloadSpec::default()
    };
    let request = generate_workload(&spec)?.remove(0);
    let store = TieredBlockStore::new(StoreConfig {
        fast_capacity_slots: 256,
        ..StoreConfig::default()
    })?;
    for block in &request.blocks[0] {
        store.put_block(block.clone())?;
    }
    let q = &request.queries[0][0];
    let handles = request.handles(0);
    let exact = exact_attention_blocks(q, &request.blocks[0], psa::attention::default_scale(spec.d))?;

    println!("{:>8} {:>7} {:>10} {:>10} {:>10}", "epsilon", "blocks", "estimated", "true", "rel_err");
    for epsilon in [0.5, 0.8, 0.9, 0.95, 0.99, 1.0] {
        let cfg = PsaConfig {
            epsilon,
            audit: true,
            ..PsaConfig::default()
        };
        let r = psa_attention(q, &handles, &cfg, &store)?;
        println!(
            "{:>8} {:>7} {:>10.4} {:>10.4} {:>10.2e}",
            epsilon,
            r.blocks_processed,
            r.estimated_coverage,
            r.true_coverage.unwrap_or(f64::NAN),
            max_relative_error(&r.output, &exact)
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
