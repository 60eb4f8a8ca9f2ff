//! Iteration-by-iteration view of the stopping rule.
//!
//! Sixteen single-token blocks with hand-picked attention masses, processed
//! in microbatches of four under oracle ranking with epsilon = 0.98. The
//! coverage estimate `AS_acc / (AS_acc + AS_min * N_left)` climbs through
//! about 0.61, 0.91 and 0.98, and processing stops after twelve blocks.
//!
//! ```bash
//! cargo run -p psa --example progressive_walkthrough
//! ```

use psa::engine::ProgressiveQuery;
use psa::{BlockHandle, BlockId, KVBlock, PsaConfig, RankingMode, StoreConfig, TieredBlockStore};

const MASSES: [f64; 16] = [
    10.0, 4.0, 3.769_230_769_230_77, 1.0, 0.5, 0.4, 0.303, 0.25, 0.2, 0.15, 0.12, 0.1, 0.05, 0.05,
    0.05, 0.05,
];

pub fn run_example() -> psa::Result<()> {
    let store = TieredBlockStore::new(StoreConfig {
        block_size: 1,
        fast_capacity_slots: 16,
        ..StoreConfig::default()
    })?;
    // With q = [1] and unit scale, a key of ln(mass) gives the block exactly that mass.
    let mut handles = Vec::new();
    for (i, &mass) in MASSES.iter().enumerate() {
        let block = KVBlock::new(BlockId(i as u64), 0, 0, 1, vec![mass.ln() as f32], vec![i as f32])?;
        handles.push(BlockHandle::from(&block));
        store.put_block(block)?;
    }
    let cfg = PsaConfig {
        epsilon: 0.98,
        microbatch_size: 4,
        block_size: 1,
        ranking_mode: RankingMode::Oracle,
        scale: Some(1.0),
        audit: true,
        ..PsaConfig::default()
    };

    let mut pq = ProgressiveQuery::new(&[1.0], &handles, &cfg, &store)?;
    let mut iteration = 0;
    while let Some(mb) = pq.next_microbatch() {
        let ids: Vec<_> = mb.iter().map(|h| h.block_id.0).collect();
        let blocks = mb
            .iter()
            .map(|h| store.load_block(h.block_id, h.layer_id))
            .collect::<psa::Result<Vec<_>>>()?;
        pq.absorb(&blocks)?;
        iteration += 1;
        println!(
            "iteration {iteration}: blocks {ids:?} -> estimated coverage {:.4}",
            pq.estimated_coverage()
        );
    }
    let r = pq.finish(Some(&store))?;
    println!(
        "stopped after {} of {} blocks; true coverage {:.4}",
        r.blocks_processed,
        r.total_blocks,
        r.true_coverage.unwrap_or(f64::NAN)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
