//! Overlapping block loads with compute.
//!
//! Every miss costs 1 ms of injected latency and every merged microbatch is
//! padded to take as long as its load. The pipelined executor prefetches the
//! next microbatch while the current one is merged, so wall time approaches
//! half the sequential time while the output stays bit-identical.
//!
//! ```bash
//! cargo run -p psa --example pipelined_overlap
//! ```

use std::time::Duration;

use psa::workload::{generate_workload, ContextDist, PlantedDist, WorkloadSpec};
use psa::{run_pipelined, run_sequential, PipelineOptions, PsaConfig, StoreConfig, TieredBlockStore};

pub fn run_example() -> psa::Result<()> {
    let request = generate_workload(&WorkloadSpec {
        n_requests: 1,
        n_layers: 1,
        context: ContextDist::Fixed(48 * 32),
        decode_steps: 1,
        planted: PlantedDist::Fraction(0.0),
        skew_min: 0.0,
        skew_max: 0.0,
        seed: 3,
        ..WorkloadSpec::default()
    })?
    .remove(0);
    let q = &request.queries[0][0];
    let handles = request.handles(0);
    let cfg = PsaConfig {
        epsilon: 1.0,
        microbatch_size: 4,
        ..PsaConfig::default()
    };
    let opts = PipelineOptions {
        compute_pad: Duration::from_millis(4),
    };
    // A fresh cold store per run so both modes see the same misses.
    let cold = || -> psa::Result<TieredBlockStore> {
        let store = TieredBlockStore::new(StoreConfig {
            fast_capacity_slots: 64,
            write_allocate: false,
            load_latency: Duration::from_millis(1),
            ..StoreConfig::default()
        })?;
        for b in &request.blocks[0] {
            store.put_block(b.clone())?;
        }
        Ok(store)
    };

    let (seq, ts) = run_sequential(q, &handles, &cfg, &cold()?, opts)?;
    let (pip, tp) = run_pipelined(q, &handles, &cfg, &cold()?, opts)?;
    println!("microbatches: {}", ts.microbatches_loaded);
    println!("sequential wall {:?}", ts.wall);
    println!("pipelined  wall {:?} ({:.2}x of sequential)", tp.wall, tp.wall.as_secs_f64() / ts.wall.as_secs_f64());
    println!("outputs bit-identical: {}", seq.output == pip.output);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
