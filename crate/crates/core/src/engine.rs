//! Progressive sparse attention.
//!
//! Blocks are ranked by estimated criticality and consumed in microbatches of
//! `m` blocks. After each microbatch the accumulated attention mass `AS_acc`
//! is compared with an upper estimate of the total mass,
//! `AS_acc + AS_min * n_left`, where `AS_min` is the smallest per-block mass
//! seen so far. Processing stops once the estimated coverage
//! `AS_acc / (AS_acc + AS_min * n_left)` strictly exceeds `epsilon`.
//!
//! The same machinery drives the fixed-budget top-k baseline, the batched
//! lockstep variant, and the per-head multi-head variant.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{block_log_as, block_partial_attention, default_scale, HeadVector, SoftmaxAccumulator};
use crate::error::{PsaError, Result};
use crate::metadata::{criticality_score, rank_by_scores, BlockId, Estimator, KVBlock};
use crate::store::{BlockHandle, TieredBlockStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMode {
    /// Rank by metadata criticality scores.
    #[default]
    Estimated,
    /// Rank by each block's true attention mass. Test and audit use only.
    Oracle,
}

impl std::str::FromStr for RankingMode {
    type Err = PsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "estimated" => Ok(RankingMode::Estimated),
            "oracle" => Ok(RankingMode::Oracle),
            other => Err(PsaError::config(format!("unknown ranking mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsaConfig {
    /// Attention weight threshold, in (0, 1].
    pub epsilon: f64,
    /// Blocks per progressive iteration.
    pub microbatch_size: usize,
    pub block_size: usize,
    pub estimator: Estimator,
    pub ranking_mode: RankingMode,
    /// Softmax temperature; `None` means `1/sqrt(d)`.
    pub scale: Option<f64>,
    /// Compute the true coverage of every result (reads all blocks).
    pub audit: bool,
}

impl Default for PsaConfig {
    fn default() -> Self {
        PsaConfig {
            epsilon: 0.95,
            microbatch_size: 4,
            block_size: 32,
            estimator: Estimator::CuboidMean,
            ranking_mode: RankingMode::Estimated,
            scale: None,
            audit: false,
        }
    }
}

impl PsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(PsaError::config(format!(
                "epsilon must be in (0, 1], got {}",
                self.epsilon
            )));
        }
        if self.microbatch_size == 0 {
            return Err(PsaError::config("microbatch_size must be at least 1"));
        }
        if self.block_size == 0 {
            return Err(PsaError::config("block_size must be at least 1"));
        }
        if let Some(s) = self.scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(PsaError::config("scale must be positive and finite"));
            }
        }
        Ok(())
    }

    pub fn scale_for(&self, d: usize) -> f64 {
        self.scale.unwrap_or_else(|| default_scale(d))
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-domain bookkeeping of `AS_acc`, `AS_min` and the number of blocks left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageEstimator {
    pub log_as_acc: f64,
    pub log_as_min: f64,
    pub n_left: usize,
}

impl CoverageEstimator {
    pub fn new(total_blocks: usize) -> Self {
        CoverageEstimator {
            log_as_acc: f64::NEG_INFINITY,
            log_as_min: f64::INFINITY,
            n_left: total_blocks,
        }
    }

    pub fn observe(&mut self, log_as: f64) {
        self.log_as_acc = log_add_exp(self.log_as_acc, log_as);
        self.log_as_min = self.log_as_min.min(log_as);
        self.n_left = self.n_left.saturating_sub(1);
    }

    /// `AS_acc / (AS_acc + AS_min * n_left)`, evaluated in the log domain.
    pub fn estimate(&self) -> Result<f64> {
        if self.log_as_acc == f64::NEG_INFINITY {
            return Err(PsaError::NoBlocksProcessed);
        }
        if self.n_left == 0 {
            return Ok(1.0);
        }
        let ratio = (self.n_left as f64).ln() + self.log_as_min - self.log_as_acc;
        Ok(1.0 / (1.0 + ratio.exp()))
    }
}

pub fn estimate_coverage(ce: &CoverageEstimator) -> Result<f64> {
    ce.estimate()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsaResult {
    pub output: HeadVector,
    pub blocks_processed: usize,
    pub total_blocks: usize,
    pub iterations: usize,
    /// Block ids in processing order.
    pub processed: Vec<BlockId>,
    pub estimated_coverage: f64,
    /// Fraction of the true softmax mass covered; only with `audit`.
    pub true_coverage: Option<f64>,
    pub terminated_early: bool,
}

/// Orders `blocks` for progressive processing of `q`.
pub fn rank_handles(
    q: &[f32],
    blocks: &[BlockHandle],
    cfg: &PsaConfig,
    store: &TieredBlockStore,
) -> Result<Vec<BlockHandle>> {
    let scale = cfg.scale_for(q.len());
    let scores = blocks
        .iter()
        .map(|h| match cfg.ranking_mode {
            RankingMode::Estimated => {
                let meta = store.metadata(h.block_id)?;
                criticality_score(q, &meta, cfg.estimator, scale)
            }
            RankingMode::Oracle => block_log_as(q, &*store.peek_block(h.block_id)?, scale),
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<BlockId> = blocks.iter().map(|h| h.block_id).collect();
    Ok(rank_by_scores(&scores, &ids)
        .into_iter()
        .map(|i| blocks[i])
        .collect())
}

/// True fraction of the softmax mass held by `processed` among `all`.
pub fn true_coverage(
    q: &[f32],
    processed: &[BlockId],
    all: &[BlockHandle],
    scale: f64,
    store: &TieredBlockStore,
) -> Result<f64> {
    let chosen: BTreeSet<BlockId> = processed.iter().copied().collect();
    let mut log_all = f64::NEG_INFINITY;
    let mut log_hit = f64::NEG_INFINITY;
    for h in all {
        let las = block_log_as(q, &*store.peek_block(h.block_id)?, scale)?;
        log_all = log_add_exp(log_all, las);
        if chosen.contains(&h.block_id) {
            log_hit = log_add_exp(log_hit, las);
        }
    }
    Ok((log_hit - log_all).exp().min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum StopRule {
    Threshold(f64),
    Budget(usize),
}

/// State of one query's progressive attention between microbatches.
///
/// Callers alternate [`next_microbatch`](Self::next_microbatch) and
/// [`absorb`](Self::absorb) until [`is_done`](Self::is_done); where and when
/// the blocks are loaded is up to the caller.
#[derive(Debug, Clone)]
pub struct ProgressiveQuery {
    q: Vec<f32>,
    scale: f64,
    microbatch: usize,
    stop: StopRule,
    all: Vec<BlockHandle>,
    ranked: Vec<BlockHandle>,
    cursor: usize,
    acc: SoftmaxAccumulator,
    coverage: CoverageEstimator,
    processed: Vec<BlockId>,
    iterations: usize,
    estimated: f64,
    done: bool,
}

impl ProgressiveQuery {
    /// Threshold-driven query, stopping once estimated coverage exceeds epsilon.
    pub fn new(
        q: &[f32],
        blocks: &[BlockHandle],
        cfg: &PsaConfig,
        store: &TieredBlockStore,
    ) -> Result<Self> {
        Self::with_rule(q, blocks, cfg, store, StopRule::Threshold(cfg.epsilon))
    }

    /// Fixed-budget query over the `k` highest-ranked blocks.
    pub fn top_k(
        q: &[f32],
        blocks: &[BlockHandle],
        k: usize,
        cfg: &PsaConfig,
        store: &TieredBlockStore,
    ) -> Result<Self> {
        if k == 0 {
            return Err(PsaError::config("k must be at least 1"));
        }
        Self::with_rule(q, blocks, cfg, store, StopRule::Budget(k.min(blocks.len())))
    }

    fn with_rule(
        q: &[f32],
        blocks: &[BlockHandle],
        cfg: &PsaConfig,
        store: &TieredBlockStore,
        stop: StopRule,
    ) -> Result<Self> {
        cfg.validate()?;
        if blocks.is_empty() {
            return Err(PsaError::EmptyContext);
        }
        let ranked = rank_handles(q, blocks, cfg, store)?;
        Ok(ProgressiveQuery {
            q: q.to_vec(),
            scale: cfg.scale_for(q.len()),
            microbatch: cfg.microbatch_size,
            stop,
            all: blocks.to_vec(),
            ranked,
            cursor: 0,
            acc: SoftmaxAccumulator::new(q.len()),
            coverage: CoverageEstimator::new(blocks.len()),
            processed: Vec::new(),
            iterations: 0,
            estimated: 0.0,
            done: false,
        })
    }

    fn limit(&self) -> usize {
        match self.stop {
            StopRule::Threshold(_) => self.ranked.len(),
            StopRule::Budget(k) => k,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Coverage estimate after the last absorbed microbatch.
    pub fn estimated_coverage(&self) -> f64 {
        self.estimated
    }

    /// Blocks merged so far.
    pub fn blocks_processed(&self) -> usize {
        self.processed.len()
    }

    pub fn ranked(&self) -> &[BlockHandle] {
        &self.ranked
    }

    pub fn query(&self) -> &[f32] {
        &self.q
    }

    /// The `i`-th microbatch in rank order, regardless of progress.
    pub fn microbatch_at(&self, i: usize) -> Option<&[BlockHandle]> {
        let start = i * self.microbatch;
        let limit = self.limit();
        (start < limit).then(|| &self.ranked[start..(start + self.microbatch).min(limit)])
    }

    pub fn next_microbatch(&self) -> Option<&[BlockHandle]> {
        if self.done {
            return None;
        }
        self.microbatch_at(self.iterations)
    }

    /// Computes and merges one microbatch, then applies the stop rule.
    /// Returns true once the query is finished.
    pub fn absorb(&mut self, blocks: &[Arc<KVBlock>]) -> Result<bool> {
        let expected = self
            .next_microbatch()
            .ok_or_else(|| PsaError::config("query already finished"))?;
        if blocks.len() != expected.len()
            || blocks.iter().zip(expected).any(|(b, h)| b.block_id != h.block_id)
        {
            return Err(PsaError::config("microbatch does not match the ranked order"));
        }
        for block in blocks {
            let part = block_partial_attention(&self.q, block, self.scale)?;
            self.acc.merge(&part);
            self.coverage.observe(part.log_as);
            self.processed.push(block.block_id);
        }
        self.cursor += blocks.len();
        self.iterations += 1;
        self.estimated = self.coverage.estimate()?;
        self.done = match self.stop {
            StopRule::Threshold(eps) => self.estimated > eps || self.cursor == self.ranked.len(),
            StopRule::Budget(k) => self.cursor >= k,
        };
        Ok(self.done)
    }

    pub fn finish(self, audit: Option<&TieredBlockStore>) -> Result<PsaResult> {
        let output = self.acc.finalize()?;
        let true_coverage = match audit {
            Some(store) => Some(true_coverage(&self.q, &self.processed, &self.all, self.scale, store)?),
            None => None,
        };
        Ok(PsaResult {
            output,
            blocks_processed: self.cursor,
            total_blocks: self.ranked.len(),
            iterations: self.iterations,
            processed: self.processed,
            estimated_coverage: self.estimated,
            true_coverage,
            terminated_early: self.cursor < self.ranked.len(),
        })
    }
}

pub(crate) fn load_all(store: &TieredBlockStore, handles: &[BlockHandle]) -> Result<Vec<Arc<KVBlock>>> {
    handles
        .iter()
        .map(|h| store.load_block(h.block_id, h.layer_id))
        .collect()
}

fn drive(mut pq: ProgressiveQuery, cfg: &PsaConfig, store: &TieredBlockStore) -> Result<PsaResult> {
    while let Some(mb) = pq.next_microbatch() {
        let blocks = load_all(store, mb)?;
        pq.absorb(&blocks)?;
    }
    pq.finish(cfg.audit.then_some(store))
}

pub fn psa_attention(
    q: &[f32],
    blocks: &[BlockHandle],
    cfg: &PsaConfig,
    store: &TieredBlockStore,
) -> Result<PsaResult> {
    drive(ProgressiveQuery::new(q, blocks, cfg, store)?, cfg, store)
}

/// Attention over exactly the `k` highest-criticality blocks.
///
/// Uses the estimator and ranking mode of `cfg`; `epsilon` is ignored.
pub fn topk_attention(
    q: &[f32],
    blocks: &[BlockHandle],
    k: usize,
    cfg: &PsaConfig,
    store: &TieredBlockStore,
) -> Result<PsaResult> {
    drive(ProgressiveQuery::top_k(q, blocks, k, cfg, store)?, cfg, store)
}

#[derive(Debug, Clone)]
pub struct BatchQuery {
    pub q: HeadVector,
    pub blocks: Vec<BlockHandle>,
}

/// What one lockstep iteration did across the live queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IterationStats {
    pub live_queries: usize,
    pub blocks_loaded: usize,
    pub misses: u64,
}

#[derive(Debug, Clone)]
pub struct BatchedOutcome {
    pub results: Vec<PsaResult>,
    pub iterations: usize,
    pub per_iteration: Vec<IterationStats>,
}

/// Which blocks each query of a batch may use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// Progressive, threshold-driven (`cfg.epsilon`).
    Progressive,
    /// Fixed top-k budget.
    TopK(usize),
}

/// Runs a batch in lockstep, retiring queries as they finish.
pub fn run_batched(
    queries: &[BatchQuery],
    selection: Selection,
    cfg: &PsaConfig,
    store: &TieredBlockStore,
) -> Result<BatchedOutcome> {
    let mut states = queries
        .iter()
        .map(|bq| match selection {
            Selection::Progressive => ProgressiveQuery::new(&bq.q, &bq.blocks, cfg, store),
            Selection::TopK(k) => ProgressiveQuery::top_k(&bq.q, &bq.blocks, k, cfg, store),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut live: Vec<usize> = (0..states.len()).collect();
    let mut per_iteration = Vec::new();
    while !live.is_empty() {
        let misses_before = store.stats().misses;
        let mut loaded = 0;
        for &i in &live {
            let mb = states[i].next_microbatch().expect("live query has work");
            let blocks = load_all(store, mb)?;
            loaded += blocks.len();
            states[i].absorb(&blocks)?;
        }
        per_iteration.push(IterationStats {
            live_queries: live.len(),
            blocks_loaded: loaded,
            misses: store.stats().misses - misses_before,
        });
        live.retain(|&i| !states[i].is_done());
    }

    let audit = cfg.audit.then_some(store);
    let results = states
        .into_iter()
        .map(|s| s.finish(audit))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchedOutcome {
        results,
        iterations: per_iteration.len(),
        per_iteration,
    })
}

pub fn psa_attention_batched(
    queries: &[BatchQuery],
    cfg: &PsaConfig,
    store: &TieredBlockStore,
) -> Result<BatchedOutcome> {
    run_batched(queries, Selection::Progressive, cfg, store)
}

#[derive(Debug, Clone)]
pub struct MultiHeadResult {
    pub per_head: Vec<PsaResult>,
    /// Union of blocks fetched by any head.
    pub fetched: BTreeSet<BlockId>,
}

/// Independent progressive attention per query head.
///
/// `kv_heads[g]` holds the blocks of KV head `g`; query head `h` reads KV head
/// `h / (query_heads.len() / kv_heads.len())`, which covers both MHA (equal
/// counts) and grouped-query attention.
pub fn psa_attention_heads(
    query_heads: &[HeadVector],
    kv_heads: &[Vec<BlockHandle>],
    cfg: &PsaConfig,
    store: &TieredBlockStore,
) -> Result<MultiHeadResult> {
    if kv_heads.is_empty() || query_heads.len() % kv_heads.len() != 0 {
        return Err(PsaError::config(format!(
            "{} query heads cannot be grouped over {} kv heads",
            query_heads.len(),
            kv_heads.len()
        )));
    }
    let group = query_heads.len() / kv_heads.len();
    let batch: Vec<BatchQuery> = query_heads
        .iter()
        .enumerate()
        .map(|(h, q)| BatchQuery {
            q: q.clone(),
            blocks: kv_heads[h / group].clone(),
        })
        .collect();
    let outcome = psa_attention_batched(&batch, cfg, store)?;
    let fetched = outcome
        .results
        .iter()
        .flat_map(|r| r.processed.iter().copied())
        .collect();
    Ok(MultiHeadResult {
        per_head: outcome.results,
        fetched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{exact_attention_blocks, max_relative_error};
    use crate::store::StoreConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One single-token block per mass value; q = [1], scale = 1, so each
    /// block's attention score is exactly `mass`.
    fn mass_store(masses: &[f64]) -> (TieredBlockStore, Vec<BlockHandle>) {
        let store = TieredBlockStore::new(StoreConfig {
            block_size: 1,
            fast_capacity_slots: 64,
            ..StoreConfig::default()
        })
        .unwrap();
        let mut handles = Vec::new();
        for (i, &m) in masses.iter().enumerate() {
            let b = KVBlock::new(BlockId(i as u64), 0, 0, 1, vec![m.ln() as f32], vec![i as f32]).unwrap();
            handles.push(BlockHandle::from(&b));
            store.put_block(b).unwrap();
        }
        (store, handles)
    }

    fn oracle_cfg(eps: f64, m: usize) -> PsaConfig {
        PsaConfig {
            epsilon: eps,
            microbatch_size: m,
            block_size: 1,
            ranking_mode: RankingMode::Oracle,
            scale: Some(1.0),
            audit: true,
            ..PsaConfig::default()
        }
    }

    fn random_store(seed: u64, n_blocks: usize, b: usize, d: usize) -> (TieredBlockStore, Vec<BlockHandle>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = TieredBlockStore::new(StoreConfig {
            block_size: b,
            fast_capacity_slots: 16,
            ..StoreConfig::default()
        })
        .unwrap();
        let mut handles = Vec::new();
        for i in 0..n_blocks {
            let hot = rng.random_bool(0.2);
            let keys: Vec<f32> = (0..b * d)
                .map(|_| rng.random_range(-1.0f32..1.0) + if hot { 1.5 } else { 0.0 })
                .collect();
            let values: Vec<f32> = (0..b * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let blk = KVBlock::new(BlockId(i as u64), 0, 0, d, keys, values).unwrap();
            handles.push(BlockHandle::from(&blk));
            store.put_block(blk).unwrap();
        }
        (store, handles)
    }

    #[test]
    fn estimate_examples() {
        let mut ce = CoverageEstimator::new(1);
        assert!(ce.estimate().is_err());
        ce.observe(2.0);
        assert_eq!(ce.estimate().unwrap(), 1.0);

        let ce = CoverageEstimator {
            log_as_acc: 9f64.ln(),
            log_as_min: 0.0,
            n_left: 1,
        };
        assert!((ce.estimate().unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn estimate_matches_raw_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let total = rng.random_range(2..40);
            let mut ce = CoverageEstimator::new(total);
            let (mut acc, mut min) = (0.0f64, f64::MAX);
            for _ in 0..rng.random_range(1..total) {
                let as_ = rng.random_range(0.01f64..50.0);
                ce.observe(as_.ln());
                acc += as_;
                min = min.min(as_);
            }
            let raw = acc / (acc + min * ce.n_left as f64);
            assert!((ce.estimate().unwrap() - raw).abs() < 1e-12);
        }
    }

    // Block masses chosen so that the three ranked microbatches of four give
    // estimated coverage 0.61, 0.91 and 0.98 with four blocks left behind.
    const WALKTHROUGH: [f64; 16] = [
        10.0, 4.0, 3.769_230_769_230_77, 1.0, // sum 18.769.., min 1
        0.5, 0.4, 0.303, 0.25, // AS_acc 20.222, min 0.25
        0.2, 0.15, 0.12, 0.1, // AS_acc 20.792, min 0.1
        0.05, 0.05, 0.05, 0.05,
    ];

    #[test]
    fn walkthrough_three_iterations() {
        let (store, handles) = mass_store(&WALKTHROUGH);
        let cfg = oracle_cfg(0.98, 4);
        let mut pq = ProgressiveQuery::new(&[1.0], &handles, &cfg, &store).unwrap();
        let mut seen = Vec::new();
        while let Some(mb) = pq.next_microbatch() {
            let blocks = load_all(&store, mb).unwrap();
            pq.absorb(&blocks).unwrap();
            seen.push(pq.estimated);
        }
        assert_eq!(seen.len(), 3);
        for (got, want) in seen.iter().zip([0.61, 0.91, 0.98]) {
            assert!((got - want).abs() < 5e-3, "{seen:?}");
        }
        let r = pq.finish(None).unwrap();
        assert_eq!(r.blocks_processed, 12);
        assert_eq!(r.iterations, 3);
        assert!(r.terminated_early);
        assert!(r.estimated_coverage > 0.98);
    }

    #[test]
    fn epsilon_one_processes_everything() {
        let (store, handles) = random_store(1, 20, 8, 16);
        let q: Vec<f32> = (0..16).map(|i| (i as f32 * 0.3).sin()).collect();
        let cfg = PsaConfig {
            epsilon: 1.0,
            block_size: 8,
            ..PsaConfig::default()
        };
        let r = psa_attention(&q, &handles, &cfg, &store).unwrap();
        assert_eq!(r.blocks_processed, 20);
        assert!(!r.terminated_early);
        let blocks: Vec<_> = handles.iter().map(|h| store.peek_block(h.block_id).unwrap()).collect();
        let exact = exact_attention_blocks(&q, blocks.iter().map(|b| &**b), cfg.scale_for(16)).unwrap();
        assert!(max_relative_error(&r.output, &exact) < 1e-5);
    }

    #[test]
    fn oracle_ranking_coverage_is_a_lower_bound() {
        for seed in 0..30 {
            let (store, handles) = random_store(seed, 24, 4, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let q: Vec<f32> = (0..8).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            for eps in [0.5, 0.8, 0.95] {
                let mut cfg = oracle_cfg(eps, 2);
                cfg.scale = None;
                cfg.block_size = 4;
                let r = psa_attention(&q, &handles, &cfg, &store).unwrap();
                let t = r.true_coverage.unwrap();
                assert!(r.estimated_coverage <= t + 1e-12);
                assert!(t >= eps);
            }
        }
    }

    #[test]
    fn work_is_monotone_in_epsilon() {
        let (store, handles) = random_store(8, 40, 4, 8);
        let q: Vec<f32> = (0..8).map(|i| 1.0 - i as f32 * 0.2).collect();
        let mut last = 0;
        for eps in [0.1, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 0.99, 1.0] {
            let cfg = PsaConfig {
                epsilon: eps,
                block_size: 4,
                ..PsaConfig::default()
            };
            let r = psa_attention(&q, &handles, &cfg, &store).unwrap();
            assert!(r.blocks_processed >= last);
            if r.terminated_early {
                assert!(r.estimated_coverage > eps);
            }
            last = r.blocks_processed;
        }
        assert_eq!(last, 40);
    }

    #[test]
    fn topk_examples() {
        let (store, handles) = random_store(3, 10, 4, 8);
        let q: Vec<f32> = vec![0.5; 8];
        let cfg = PsaConfig {
            block_size: 4,
            ..PsaConfig::default()
        };
        let all = topk_attention(&q, &handles, 50, &cfg, &store).unwrap();
        let full = psa_attention(&q, &handles, &PsaConfig { epsilon: 1.0, ..cfg.clone() }, &store).unwrap();
        assert_eq!(all.blocks_processed, 10);
        assert_eq!(all.output, full.output);

        let one = topk_attention(&q, &handles, 1, &cfg, &store).unwrap();
        let top = rank_handles(&q, &handles, &cfg, &store).unwrap()[0];
        let part = block_partial_attention(&q, &store.peek_block(top.block_id).unwrap(), cfg.scale_for(8)).unwrap();
        let mut acc = SoftmaxAccumulator::new(8);
        acc.merge(&part);
        assert_eq!(one.output, acc.finalize().unwrap());
        assert_eq!(one.processed, vec![top.block_id]);
        assert!(topk_attention(&q, &handles, 0, &cfg, &store).is_err());
    }

    #[test]
    fn empty_block_list_errors() {
        let (store, _) = random_store(0, 1, 4, 8);
        let cfg = PsaConfig::default();
        assert!(matches!(psa_attention(&[0.0; 8], &[], &cfg, &store), Err(PsaError::EmptyContext)));
        let bad = PsaConfig { epsilon: 0.0, ..cfg };
        assert!(psa_attention(&[0.0; 8], &[BlockHandle::new(BlockId(0), 0)], &bad, &store).is_err());
        let missing = [BlockHandle::new(BlockId(99), 0)];
        assert!(psa_attention(&[0.0; 8], &missing, &PsaConfig::default(), &store).is_err());
    }

    #[test]
    fn batch_of_one_equals_single() {
        let (store, handles) = random_store(5, 16, 4, 8);
        let q = HeadVector::new(vec![0.7; 8]).unwrap();
        let cfg = PsaConfig {
            block_size: 4,
            epsilon: 0.9,
            ..PsaConfig::default()
        };
        let single = psa_attention(&q, &handles, &cfg, &store).unwrap();
        let batch = psa_attention_batched(&[BatchQuery { q, blocks: handles }], &cfg, &store).unwrap();
        assert_eq!(batch.results[0], single);
        assert_eq!(batch.iterations, single.iterations);
    }

    #[test]
    fn batched_runs_until_slowest_query() {
        // Query A stops after 2 iterations, query B after 5.
        let quick = [100.0, 100.0, 100.0, 100.0, 1.0, 1.0, 1.0, 1.0];
        let slow = [1.0; 10];
        let mut masses = quick.to_vec();
        masses.extend_from_slice(&slow);
        let (store, handles) = mass_store(&masses);
        let cfg = oracle_cfg(0.99, 2);
        let a = handles[..8].to_vec();
        let b = handles[8..].to_vec();
        let q = HeadVector::new(vec![1.0]).unwrap();
        let ra = psa_attention(&q, &a, &cfg, &store).unwrap();
        let rb = psa_attention(&q, &b, &cfg, &store).unwrap();
        assert_eq!((ra.iterations, rb.iterations), (3, 5));

        let out = psa_attention_batched(
            &[BatchQuery { q: q.clone(), blocks: a }, BatchQuery { q, blocks: b }],
            &cfg,
            &store,
        )
        .unwrap();
        assert_eq!(out.iterations, 5);
        let live: Vec<usize> = out.per_iteration.iter().map(|s| s.live_queries).collect();
        assert_eq!(live, vec![2, 2, 2, 1, 1]);
        assert_eq!(out.results[0], ra);
        assert_eq!(out.results[1], rb);
    }

    #[test]
    fn heads_share_kv_under_gqa() {
        let (store, handles) = random_store(6, 12, 4, 8);
        let (kv0, kv1) = handles.split_at(6);
        let heads: Vec<HeadVector> = (0..4)
            .map(|h| HeadVector::new((0..8).map(|i| ((h * 8 + i) as f32).cos()).collect()).unwrap())
            .collect();
        let cfg = PsaConfig {
            block_size: 4,
            epsilon: 0.9,
            ..PsaConfig::default()
        };
        let r = psa_attention_heads(&heads, &[kv0.to_vec(), kv1.to_vec()], &cfg, &store).unwrap();
        assert_eq!(r.per_head.len(), 4);
        for (h, res) in r.per_head.iter().enumerate() {
            let kv = if h < 2 { kv0 } else { kv1 };
            assert!(res.processed.iter().all(|id| kv.iter().any(|x| x.block_id == *id)));
            assert_eq!(*res, psa_attention(&heads[h], kv, &cfg, &store).unwrap());
        }
        let union: BTreeSet<BlockId> = r.per_head.iter().flat_map(|x| x.processed.clone()).collect();
        assert_eq!(r.fetched, union);
        assert!(psa_attention_heads(&heads, &[kv0.to_vec(), kv1.to_vec(), kv0.to_vec()], &cfg, &store).is_err());
    }
}
