//! Pipelined execution of one progressive query.
//!
//! A loader thread fetches microbatch `i + 1` from the store while the compute
//! thread merges microbatch `i`. The two meet at a rendezvous channel, so at
//! most one loaded microbatch is ever waiting for compute. The compute side
//! checks coverage after each merge and raises a [`StopSignal`]; the loader
//! polls it before starting every new load.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::engine::{load_all, ProgressiveQuery, PsaConfig, PsaResult};
use crate::error::{PsaError, Result};
use crate::metadata::KVBlock;
use crate::store::{BlockHandle, TieredBlockStore};

/// One-shot flag: once raised it stays raised.
#[derive(Debug, Clone, Default)]
pub struct StopSignal(Arc<AtomicBool>);

impl StopSignal {
    pub fn new() -> Self {
        StopSignal::default()
    }

    pub fn raise(&self) {
        self.0.store(true, Ordering::Release);
    }

    pub fn is_raised(&self) -> bool {
        self.0.load(Ordering::Acquire)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PipelineOptions {
    /// Extra time spent in the compute agent per microbatch.
    pub compute_pad: Duration,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineTimings {
    /// Load time of every microbatch that was loaded, in load order.
    pub load: Vec<Duration>,
    /// Compute time of every microbatch that was merged.
    pub compute: Vec<Duration>,
    pub wall: Duration,
    pub sequential_equivalent: Duration,
    pub overlap_efficiency: f64,
    pub microbatches_loaded: usize,
    pub blocks_loaded: usize,
}

impl PipelineTimings {
    fn finish(&mut self, wall: Duration) {
        self.wall = wall;
        self.sequential_equivalent = self.load.iter().chain(&self.compute).sum();
        self.overlap_efficiency = if wall.is_zero() {
            1.0
        } else {
            self.sequential_equivalent.as_secs_f64() / wall.as_secs_f64()
        };
    }

    /// Blocks fetched by the loader but never merged.
    pub fn wasted_blocks(&self, result: &PsaResult) -> usize {
        self.blocks_loaded - result.blocks_processed
    }
}

fn compute_step(pq: &mut ProgressiveQuery, blocks: &[Arc<KVBlock>], pad: Duration) -> Result<(bool, Duration)> {
    let t = Instant::now();
    let done = pq.absorb(blocks)?;
    if !pad.is_zero() {
        thread::sleep(pad);
    }
    Ok((done, t.elapsed()))
}

/// Load-then-compute, one microbatch at a time.
pub fn run_sequential(
    q: &[f32],
    blocks: &[BlockHandle],
    cfg: &PsaConfig,
    store: &TieredBlockStore,
    opts: PipelineOptions,
) -> Result<(PsaResult, PipelineTimings)> {
    let start = Instant::now();
    let mut pq = ProgressiveQuery::new(q, blocks, cfg, store)?;
    let mut timings = PipelineTimings::default();
    while let Some(mb) = pq.next_microbatch() {
        let t = Instant::now();
        let loaded = load_all(store, mb)?;
        timings.load.push(t.elapsed());
        timings.microbatches_loaded += 1;
        timings.blocks_loaded += loaded.len();
        let (_, dt) = compute_step(&mut pq, &loaded, opts.compute_pad)?;
        timings.compute.push(dt);
    }
    let result = pq.finish(cfg.audit.then_some(store))?;
    timings.finish(start.elapsed());
    Ok((result, timings))
}

type Loaded = Result<(Vec<Arc<KVBlock>>, Duration)>;

/// Overlaps loading of the next microbatch with compute of the current one.
///
/// Produces the same [`PsaResult`] as [`run_sequential`] (and as
/// [`crate::engine::psa_attention`]) for the same inputs.
pub fn run_pipelined(
    q: &[f32],
    blocks: &[BlockHandle],
    cfg: &PsaConfig,
    store: &TieredBlockStore,
    opts: PipelineOptions,
) -> Result<(PsaResult, PipelineTimings)> {
    let start = Instant::now();
    let mut pq = ProgressiveQuery::new(q, blocks, cfg, store)?;
    let plan: Vec<Vec<BlockHandle>> = (0..)
        .map_while(|i| pq.microbatch_at(i).map(<[BlockHandle]>::to_vec))
        .collect();
    let stop = StopSignal::new();
    let (tx, rx) = sync_channel::<Loaded>(0);

    let (compute_out, loader_out) = thread::scope(|s| {
        let loader_stop = stop.clone();
        let loader = s.spawn(move || {
            let mut loads = Vec::new();
            let mut blocks_loaded = 0;
            for mb in &plan {
                if loader_stop.is_raised() {
                    break;
                }
                let t = Instant::now();
                let res = load_all(store, mb);
                let failed = res.is_err();
                if let Ok(b) = &res {
                    blocks_loaded += b.len();
                }
                let dt = t.elapsed();
                loads.push(dt);
                if tx.send(res.map(|b| (b, dt))).is_err() || failed {
                    break;
                }
            }
            (loads, blocks_loaded)
        });

        let compute = |rx: Receiver<Loaded>, pq: &mut ProgressiveQuery| -> Result<Vec<Duration>> {
            let mut compute = Vec::new();
            for msg in rx.iter() {
                let (loaded, _) = msg?;
                let (done, dt) = compute_step(pq, &loaded, opts.compute_pad)?;
                compute.push(dt);
                if done {
                    stop.raise();
                    break;
                }
            }
            Ok(compute)
        };
        // `rx` is dropped when `compute` returns, which unblocks the loader.
        let out = compute(rx, &mut pq);
        (out, loader.join())
    });

    let (loads, blocks_loaded) = loader_out.map_err(|_| PsaError::LoaderPanicked)?;
    let compute = compute_out?;
    let result = pq.finish(cfg.audit.then_some(store))?;
    let mut timings = PipelineTimings {
        microbatches_loaded: loads.len(),
        load: loads,
        compute,
        blocks_loaded,
        ..PipelineTimings::default()
    };
    timings.finish(start.elapsed());
    Ok((result, timings))
}
