//! Decode-only serving loop on simulated time.
//!
//! Requests are admitted first-come-first-served while every admitted
//! request can run one progressive iteration at once: each live
//! (request, layer) pair reserves one microbatch of fast-tier slots. Admitted
//! requests are prefilled into the store, then decode in lockstep; each step
//! runs the batched engine layer by layer. Step time is modeled from the
//! store's miss counts and the number of computed blocks, so reports are
//! deterministic.

use std::collections::VecDeque;

use serde::Serialize;

use crate::engine::{run_batched, BatchQuery, IterationStats, PsaConfig, Selection};
use crate::error::{PsaError, Result};
use crate::store::{CacheStats, PoolPolicy, StoreConfig, TieredBlockStore};
use crate::workload::Request;

/// Which attention the engine runs per (request, layer) query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMethod {
    /// Every block.
    Exact,
    /// Progressive, with the engine's epsilon.
    Psa,
    /// The `k` highest-criticality blocks.
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchingConfig {
    pub max_batch: usize,
    /// Modeled slow-tier transfer cost per missed block.
    pub load_ms_per_block: f64,
    pub compute_ms_per_block: f64,
    pub step_overhead_ms: f64,
    /// Overlap loading of iteration `i + 1` with compute of iteration `i`.
    pub pipelined: bool,
}

impl Default for BatchingConfig {
    fn default() -> Self {
        BatchingConfig {
            max_batch: 16,
            load_ms_per_block: 0.05,
            compute_ms_per_block: 0.02,
            step_overhead_ms: 0.1,
            pipelined: true,
        }
    }
}

impl BatchingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_batch == 0 {
            return Err(PsaError::config("max_batch must be at least 1"));
        }
        for (name, v) in [
            ("load_ms_per_block", self.load_ms_per_block),
            ("compute_ms_per_block", self.compute_ms_per_block),
            ("step_overhead_ms", self.step_overhead_ms),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PsaError::config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Admit,
    Step,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServingEvent {
    pub time_ms: f64,
    pub kind: EventKind,
    pub request_id: Option<u64>,
    pub live: usize,
    /// Slots reserved by admitted requests in the fullest eviction domain.
    pub reserved_slots: usize,
    /// Capacity of that domain.
    pub capacity_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestOutcome {
    pub request_id: u64,
    pub arrival_ms: f64,
    pub admitted_ms: f64,
    pub finished_ms: f64,
    pub tbt_ms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Summary {
    pub fn of(samples: &[f64]) -> Summary {
        if samples.is_empty() {
            return Summary::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Summary {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: percentile(&s, 50.0),
            p99: percentile(&s, 99.0),
            max: s[s.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServingReport {
    pub method: AttentionMethod,
    pub n_requests: usize,
    pub completed: usize,
    pub decode_steps: usize,
    pub tbt_ms: Summary,
    /// Blocks computed per (request, step, layer) query.
    pub blocks_per_query: Summary,
    /// Computed blocks over all available blocks.
    pub kv_fraction: f64,
    /// Only when the engine audits coverage.
    pub mean_true_coverage: Option<f64>,
    pub min_true_coverage: Option<f64>,
    pub hit_ratio: f64,
    pub cache: CacheStats,
    /// Modeled sequential time over modeled (possibly pipelined) time.
    pub overlap_efficiency: f64,
    pub admission_order: Vec<u64>,
    pub max_reserved_slots: usize,
    pub makespan_ms: f64,
    pub requests: Vec<RequestOutcome>,
    pub events: Vec<ServingEvent>,
}

/// Modeled (pipelined, sequential) time of one batched layer execution.
fn layer_time(iters: &[IterationStats], b: &BatchingConfig) -> (f64, f64) {
    let load: Vec<f64> = iters.iter().map(|s| s.misses as f64 * b.load_ms_per_block).collect();
    let compute: Vec<f64> = iters
        .iter()
        .map(|s| s.blocks_loaded as f64 * b.compute_ms_per_block)
        .collect();
    let sequential: f64 = load.iter().chain(&compute).sum();
    let pipelined = match load.first() {
        None => 0.0,
        Some(first) => {
            first
                + compute
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c.max(load.get(i + 1).copied().unwrap_or(0.0)))
                    .sum::<f64>()
        }
    };
    (pipelined, sequential)
}

struct Reservation {
    per_request: usize,
    domain_capacity: usize,
}

impl Reservation {
    fn new(store_cfg: &StoreConfig, m: usize) -> Self {
        let per_request = match store_cfg.policy {
            PoolPolicy::Unified => m * store_cfg.n_layers as usize,
            PoolPolicy::LayerPartitioned => m,
        };
        Reservation {
            per_request,
            domain_capacity: store_cfg.domain_capacity(),
        }
    }

    fn reserved(&self, live: usize) -> usize {
        live * self.per_request
    }

    fn fits(&self, live: usize) -> bool {
        self.reserved(live) <= self.domain_capacity
    }
}

struct Live {
    idx: usize,
    step: usize,
    admitted_ms: f64,
    tbt: Vec<f64>,
}

pub fn run_serving(
    requests: &[Request],
    method: AttentionMethod,
    engine: &PsaConfig,
    store_cfg: &StoreConfig,
    batching: &BatchingConfig,
) -> Result<ServingReport> {
    if requests.is_empty() {
        return Err(PsaError::EmptyContext);
    }
    engine.validate()?;
    batching.validate()?;
    let mut engine = engine.clone();
    if method == AttentionMethod::Exact {
        engine.epsilon = 1.0;
    }
    let selection = match method {
        AttentionMethod::Psa | AttentionMethod::Exact => Selection::Progressive,
        AttentionMethod::TopK(k) => Selection::TopK(k),
    };

    let store = TieredBlockStore::new(store_cfg.clone())?;
    let reservation = Reservation::new(store_cfg, engine.microbatch_size);
    for r in requests {
        if r.n_layers() != store_cfg.n_layers as usize {
            return Err(PsaError::config(format!(
                "request {} has {} layers, store has {}",
                r.request_id,
                r.n_layers(),
                store_cfg.n_layers
            )));
        }
        if !reservation.fits(1) {
            return Err(PsaError::Unschedulable {
                request: r.request_id,
                reason: format!(
                    "one iteration needs {} slots, pool has {}",
                    reservation.per_request, reservation.domain_capacity
                ),
            });
        }
    }

    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.sort_by(|&a, &b| {
        requests[a]
            .arrival_ms
            .total_cmp(&requests[b].arrival_ms)
            .then(requests[a].request_id.cmp(&requests[b].request_id))
    });
    let mut pending: VecDeque<usize> = order.into();

    let mut now = 0.0f64;
    let mut live: Vec<Live> = Vec::new();
    let mut events = Vec::new();
    let mut outcomes = Vec::new();
    let mut admission_order = Vec::new();
    let mut blocks_per_query = Vec::new();
    let mut coverages = Vec::new();
    let (mut computed, mut available) = (0usize, 0usize);
    let (mut pipelined_total, mut sequential_total) = (0.0f64, 0.0f64);
    let mut max_reserved = 0;
    let mut steps = 0;

    let mut log = |events: &mut Vec<ServingEvent>, now: f64, kind, id, n_live: usize| {
        let reserved = reservation.reserved(n_live);
        max_reserved = max_reserved.max(reserved);
        events.push(ServingEvent {
            time_ms: now,
            kind,
            request_id: id,
            live: n_live,
            reserved_slots: reserved,
            capacity_slots: reservation.domain_capacity,
        });
    };

    loop {
        while let Some(&idx) = pending.front() {
            let r = &requests[idx];
            if r.arrival_ms > now
                || live.len() >= batching.max_batch
                || !reservation.fits(live.len() + 1)
            {
                break;
            }
            pending.pop_front();
            for block in r.blocks.iter().flatten() {
                store.put_block(block.clone())?;
            }
            live.push(Live {
                idx,
                step: 0,
                admitted_ms: now,
                tbt: Vec::new(),
            });
            admission_order.push(r.request_id);
            log(&mut events, now, EventKind::Admit, Some(r.request_id), live.len());
        }

        if live.is_empty() {
            match pending.front() {
                Some(&idx) => {
                    now = now.max(requests[idx].arrival_ms);
                    continue;
                }
                None => break,
            }
        }

        let mut step_ms = batching.step_overhead_ms;
        for layer in 0..store_cfg.n_layers as usize {
            let batch: Vec<BatchQuery> = live
                .iter()
                .map(|l| {
                    let r = &requests[l.idx];
                    BatchQuery {
                        q: r.queries[l.step][layer].clone(),
                        blocks: r.handles(layer),
                    }
                })
                .collect();
            let outcome = run_batched(&batch, selection, &engine, &store)?;
            for (res, bq) in outcome.results.iter().zip(&batch) {
                blocks_per_query.push(res.blocks_processed as f64);
                computed += res.blocks_processed;
                available += bq.blocks.len();
                if let Some(c) = res.true_coverage {
                    coverages.push(c);
                }
            }
            let (pipe, seq) = layer_time(&outcome.per_iteration, batching);
            pipelined_total += pipe;
            sequential_total += seq;
            step_ms += if batching.pipelined { pipe } else { seq };
        }
        now += step_ms;
        steps += 1;
        log(&mut events, now, EventKind::Step, None, live.len());

        let mut still = Vec::with_capacity(live.len());
        for mut l in live.drain(..) {
            l.tbt.push(step_ms);
            l.step += 1;
            let r = &requests[l.idx];
            if l.step < r.decode_steps {
                still.push(l);
                continue;
            }
            store.release_request(r.request_id)?;
            outcomes.push(RequestOutcome {
                request_id: r.request_id,
                arrival_ms: r.arrival_ms,
                admitted_ms: l.admitted_ms,
                finished_ms: now,
                tbt_ms: l.tbt,
            });
            log(&mut events, now, EventKind::Finish, Some(r.request_id), still.len());
        }
        live = still;
    }

    outcomes.sort_by_key(|o| o.request_id);
    let tbt: Vec<f64> = outcomes.iter().flat_map(|o| o.tbt_ms.iter().copied()).collect();
    let cache = store.stats();
    let (mean_cov, min_cov) = if coverages.is_empty() {
        (None, None)
    } else {
        (
            Some(coverages.iter().sum::<f64>() / coverages.len() as f64),
            Some(coverages.iter().copied().fold(f64::INFINITY, f64::min)),
        )
    };
    Ok(ServingReport {
        method,
        n_requests: requests.len(),
        completed: outcomes.len(),
        decode_steps: steps,
        tbt_ms: Summary::of(&tbt),
        blocks_per_query: Summary::of(&blocks_per_query),
        kv_fraction: computed as f64 / available.max(1) as f64,
        mean_true_coverage: mean_cov,
        min_true_coverage: min_cov,
        hit_ratio: cache.hit_ratio(),
        cache,
        overlap_efficiency: if pipelined_total > 0.0 {
            sequential_total / pipelined_total
        } else {
            1.0
        },
        admission_order,
        max_reserved_slots: max_reserved,
        makespan_ms: now,
        requests: outcomes,
        events,
    })
}
