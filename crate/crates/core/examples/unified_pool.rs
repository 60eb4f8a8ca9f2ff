//! Unified fast pool versus per-layer partitions on a replayed trace.
//!
//! Two layers share 64 fast slots. Layer 0 cycles over a working set of 54
//! blocks, layer 1 over 6: the unified pool fits both, while a 32/32 split
//! thrashes layer 0. With balanced working sets the two policies tie.
//!
//! ```bash
//! cargo run -p psa --example unified_pool
//! ```

use psa::store::replay_trace;
use psa::{BlockHandle, BlockId, KVBlock, PoolPolicy, StoreConfig, TieredBlockStore};

fn trace(working_sets: [u64; 2], rounds: usize) -> Vec<BlockHandle> {
    let mut out = Vec::new();
    for _ in 0..rounds {
        for (layer, &n) in working_sets.iter().enumerate() {
            for i in 0..n {
                out.push(BlockHandle::new(BlockId(layer as u64 * 1000 + i), layer as u32));
            }
        }
    }
    out
}

fn hit_ratio(policy: PoolPolicy, trace: &[BlockHandle]) -> psa::Result<f64> {
    let store = TieredBlockStore::new(StoreConfig {
        fast_capacity_slots: 64,
        n_layers: 2,
        block_size: 1,
        policy,
        write_allocate: false,
        ..StoreConfig::default()
    })?;
    let mut seen = std::collections::BTreeSet::new();
    for h in trace {
        if seen.insert(h.block_id) {
            store.put_block(KVBlock::new(h.block_id, 0, h.layer_id, 2, vec![0.0, 1.0], vec![1.0, 0.0])?)?;
        }
    }
    Ok(replay_trace(&store, trace)?.hit_ratio())
}

pub fn run_example() -> psa::Result<()> {
    for (name, sets) in [("skewed", [54, 6]), ("balanced", [30, 30])] {
        let t = trace(sets, 20);
        let unified = hit_ratio(PoolPolicy::Unified, &t)?;
        let partitioned = hit_ratio(PoolPolicy::LayerPartitioned, &t)?;
        println!(
            "{name:>8}: unified {:.1}%  partitioned {:.1}%  gap {:+.1} points",
            100.0 * unified,
            100.0 * partitioned,
            100.0 * (unified - partitioned)
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
