//! Two-tier KV block store.
//!
//! The slow tier (backing map) holds every block; the fast tier is a fixed
//! number of slots managed either as one pool shared by all layers
//! ([`PoolPolicy::Unified`]) or as equal per-layer partitions
//! ([`PoolPolicy::LayerPartitioned`]). Loads that miss the fast tier copy the
//! block in, evicting by LRU or FIFO within the eviction domain, and sleep for
//! the configured slow-tier latency.
//!
//! Block metadata is built at insertion and always resident.
//!
//! All state sits behind one mutex; readers receive `Arc<KVBlock>` so an
//! eviction never invalidates a block that is still being computed on.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{PsaError, Result};
use crate::metadata::{build_metadata, BlockId, BlockMetadata, KVBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolPolicy {
    #[default]
    Unified,
    LayerPartitioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    #[default]
    Lru,
    Fifo,
}

/// Addresses one block for a load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockHandle {
    pub block_id: BlockId,
    pub layer_id: u32,
}

impl BlockHandle {
    pub fn new(block_id: BlockId, layer_id: u32) -> Self {
        BlockHandle { block_id, layer_id }
    }
}

impl From<&KVBlock> for BlockHandle {
    fn from(b: &KVBlock) -> Self {
        BlockHandle::new(b.block_id, b.layer_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    pub fast_capacity_slots: usize,
    pub n_layers: u32,
    /// Tokens per block; used for payload accounting and validation.
    pub block_size: usize,
    pub policy: PoolPolicy,
    pub eviction: EvictionPolicy,
    /// Newly inserted blocks also occupy a fast slot.
    pub write_allocate: bool,
    /// Slow-tier latency charged per missed block.
    pub load_latency: Duration,
    pub record_trace: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            fast_capacity_slots: 1024,
            n_layers: 1,
            block_size: 32,
            policy: PoolPolicy::Unified,
            eviction: EvictionPolicy::Lru,
            write_allocate: true,
            load_latency: Duration::ZERO,
            record_trace: false,
        }
    }
}

impl StoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(PsaError::config("store needs at least one layer"));
        }
        if self.block_size == 0 {
            return Err(PsaError::config("block_size must be at least 1"));
        }
        if self.fast_capacity_slots == 0 {
            return Err(PsaError::config("fast_capacity_slots must be at least 1"));
        }
        if self.policy == PoolPolicy::LayerPartitioned
            && self.fast_capacity_slots < self.n_layers as usize
        {
            return Err(PsaError::config(format!(
                "{} slots cannot be partitioned over {} layers",
                self.fast_capacity_slots, self.n_layers
            )));
        }
        Ok(())
    }

    /// Slots available to blocks of `layer`.
    pub fn domain_capacity(&self) -> usize {
        match self.policy {
            PoolPolicy::Unified => self.fast_capacity_slots,
            PoolPolicy::LayerPartitioned => self.fast_capacity_slots / self.n_layers as usize,
        }
    }

    fn n_domains(&self) -> usize {
        match self.policy {
            PoolPolicy::Unified => 1,
            PoolPolicy::LayerPartitioned => self.n_layers as usize,
        }
    }

    fn domain_of(&self, layer: u32) -> usize {
        match self.policy {
            PoolPolicy::Unified => 0,
            PoolPolicy::LayerPartitioned => layer as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub bytes_transferred: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub bytes_transferred: u64,
    pub per_layer: BTreeMap<u32, LayerStats>,
}

impl CacheStats {
    pub fn accesses(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn hit_ratio(&self) -> f64 {
        match self.accesses() {
            0 => 0.0,
            n => self.hits as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub layer_id: u32,
    pub block_id: BlockId,
    pub hit: bool,
    pub evicted: Option<BlockId>,
}

impl TraceEvent {
    /// `seq,layer_id,block_id,hit|miss,evicted_id|-`
    pub fn to_line(&self) -> String {
        let evicted = self
            .evicted
            .map_or_else(|| "-".to_string(), |id| id.to_string());
        format!(
            "{},{},{},{},{}",
            self.seq,
            self.layer_id,
            self.block_id,
            if self.hit { "hit" } else { "miss" },
            evicted
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotUsage {
    pub occupied: usize,
    pub free: usize,
    pub capacity: usize,
}

#[derive(Debug)]
struct Resident {
    slot: usize,
    order_key: u64,
}

#[derive(Debug)]
struct Domain {
    capacity: usize,
    free_slots: Vec<usize>,
    resident: HashMap<BlockId, Resident>,
    /// Eviction order: smallest key is evicted first.
    order: BTreeMap<u64, BlockId>,
}

impl Domain {
    fn new(base: usize, capacity: usize) -> Self {
        Domain {
            capacity,
            free_slots: (base..base + capacity).rev().collect(),
            resident: HashMap::new(),
            order: BTreeMap::new(),
        }
    }

    fn remove(&mut self, id: BlockId) -> bool {
        match self.resident.remove(&id) {
            Some(r) => {
                self.order.remove(&r.order_key);
                self.free_slots.push(r.slot);
                true
            }
            None => false,
        }
    }
}

#[derive(Debug)]
struct Inner {
    domains: Vec<Domain>,
    backing: HashMap<BlockId, Arc<KVBlock>>,
    meta: HashMap<BlockId, Arc<BlockMetadata>>,
    owners: BTreeMap<u64, Vec<BlockId>>,
    tick: u64,
    seq: u64,
    stats: CacheStats,
    trace: Vec<TraceEvent>,
}

impl Inner {
    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    /// Places `id` into its domain, evicting if full. Returns the victim.
    fn install(&mut self, domain: usize, id: BlockId) -> Option<BlockId> {
        let tick = self.next_tick();
        let dom = &mut self.domains[domain];
        let mut victim = None;
        if dom.free_slots.is_empty() {
            let (&key, &old) = dom.order.iter().next().expect("full domain has residents");
            dom.order.remove(&key);
            let r = dom.resident.remove(&old).expect("ordered block is resident");
            dom.free_slots.push(r.slot);
            victim = Some(old);
        }
        let slot = dom.free_slots.pop().expect("slot available after eviction");
        dom.resident.insert(id, Resident { slot, order_key: tick });
        dom.order.insert(tick, id);

        if let Some(old) = victim {
            self.stats.evictions += 1;
            let layer = self.backing[&old].layer_id;
            self.stats.per_layer.entry(layer).or_default().evictions += 1;
        }
        victim
    }
}

#[derive(Debug)]
pub struct TieredBlockStore {
    cfg: StoreConfig,
    inner: Mutex<Inner>,
}

impl TieredBlockStore {
    pub fn new(cfg: StoreConfig) -> Result<Self> {
        cfg.validate()?;
        let per = cfg.domain_capacity();
        let domains = (0..cfg.n_domains()).map(|i| Domain::new(i * per, per)).collect();
        Ok(TieredBlockStore {
            cfg,
            inner: Mutex::new(Inner {
                domains,
                backing: HashMap::new(),
                meta: HashMap::new(),
                owners: BTreeMap::new(),
                tick: 0,
                seq: 0,
                stats: CacheStats::default(),
                trace: Vec::new(),
            }),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("block store lock poisoned")
    }

    /// Size in bytes of one full block: K and V, `block_size x d` f32 each.
    pub fn block_payload_bytes(&self, d: usize) -> u64 {
        (2 * self.cfg.block_size * d * std::mem::size_of::<f32>()) as u64
    }

    pub fn put_block(&self, block: KVBlock) -> Result<()> {
        if block.n_tokens() == 0 {
            return Err(PsaError::EmptyBlock);
        }
        if block.n_tokens() > self.cfg.block_size {
            return Err(PsaError::config(format!(
                "block {} has {} tokens, block size is {}",
                block.block_id,
                block.n_tokens(),
                self.cfg.block_size
            )));
        }
        if block.layer_id >= self.cfg.n_layers {
            return Err(PsaError::config(format!(
                "layer {} out of range for {} layers",
                block.layer_id, self.cfg.n_layers
            )));
        }
        let meta = build_metadata(&block)?;
        let id = block.block_id;
        let domain = self.cfg.domain_of(block.layer_id);

        let mut inner = self.lock();
        if inner.backing.contains_key(&id) {
            return Err(PsaError::DuplicateBlock(id));
        }
        inner.owners.entry(block.request_id).or_default().push(id);
        inner.meta.insert(id, Arc::new(meta));
        inner.backing.insert(id, Arc::new(block));
        if self.cfg.write_allocate {
            inner.install(domain, id);
        }
        Ok(())
    }

    /// Fetches a block through the fast tier, recording a hit or a miss.
    pub fn load_block(&self, block_id: BlockId, layer_id: u32) -> Result<Arc<KVBlock>> {
        let (block, missed) = {
            let mut inner = self.lock();
            let block = inner
                .backing
                .get(&block_id)
                .cloned()
                .ok_or(PsaError::UnknownBlock(block_id))?;
            if block.layer_id != layer_id {
                return Err(PsaError::config(format!(
                    "block {block_id} belongs to layer {}, not {layer_id}",
                    block.layer_id
                )));
            }
            let domain = self.cfg.domain_of(layer_id);
            let hit = inner.domains[domain].resident.contains_key(&block_id);
            let mut evicted = None;
            if hit {
                if self.cfg.eviction == EvictionPolicy::Lru {
                    let tick = inner.next_tick();
                    let dom = &mut inner.domains[domain];
                    let r = dom.resident.get_mut(&block_id).expect("checked resident");
                    dom.order.remove(&r.order_key);
                    r.order_key = tick;
                    dom.order.insert(tick, block_id);
                }
                inner.stats.hits += 1;
                inner.stats.per_layer.entry(layer_id).or_default().hits += 1;
            } else {
                evicted = inner.install(domain, block_id);
                let bytes = self.block_payload_bytes(block.dim());
                inner.stats.misses += 1;
                inner.stats.bytes_transferred += bytes;
                let layer = inner.stats.per_layer.entry(layer_id).or_default();
                layer.misses += 1;
                layer.bytes_transferred += bytes;
            }
            if self.cfg.record_trace {
                let seq = inner.seq;
                inner.trace.push(TraceEvent {
                    seq,
                    layer_id,
                    block_id,
                    hit,
                    evicted,
                });
            }
            inner.seq += 1;
            (block, !hit)
        };
        if missed && !self.cfg.load_latency.is_zero() {
            std::thread::sleep(self.cfg.load_latency);
        }
        Ok(block)
    }

    /// Reads a block from the backing tier without touching the fast tier or
    /// the statistics. Intended for oracle audits.
    pub fn peek_block(&self, block_id: BlockId) -> Result<Arc<KVBlock>> {
        self.lock()
            .backing
            .get(&block_id)
            .cloned()
            .ok_or(PsaError::UnknownBlock(block_id))
    }

    pub fn metadata(&self, block_id: BlockId) -> Result<Arc<BlockMetadata>> {
        self.lock()
            .meta
            .get(&block_id)
            .cloned()
            .ok_or(PsaError::UnknownBlock(block_id))
    }

    /// Drops every block owned by `request_id` from both tiers. Returns the
    /// number of fast-tier slots freed.
    pub fn release_request(&self, request_id: u64) -> Result<usize> {
        let mut inner = self.lock();
        let ids = inner
            .owners
            .remove(&request_id)
            .ok_or(PsaError::UnknownRequest(request_id))?;
        let mut freed = 0;
        for id in ids {
            let block = inner.backing.remove(&id).expect("owned block in backing");
            inner.meta.remove(&id);
            let domain = self.cfg.domain_of(block.layer_id);
            if inner.domains[domain].remove(id) {
                freed += 1;
            }
        }
        Ok(freed)
    }

    pub fn is_resident(&self, block_id: BlockId) -> bool {
        self.lock().domains.iter().any(|d| d.resident.contains_key(&block_id))
    }

    pub fn contains(&self, block_id: BlockId) -> bool {
        self.lock().backing.contains_key(&block_id)
    }

    pub fn block_count(&self) -> usize {
        self.lock().backing.len()
    }

    pub fn request_blocks(&self, request_id: u64) -> Option<Vec<BlockId>> {
        self.lock().owners.get(&request_id).cloned()
    }

    /// Occupancy of each eviction domain (one entry for the unified pool).
    pub fn slot_usage(&self) -> Vec<SlotUsage> {
        self.lock()
            .domains
            .iter()
            .map(|d| SlotUsage {
                occupied: d.resident.len(),
                free: d.free_slots.len(),
                capacity: d.capacity,
            })
            .collect()
    }

    /// Bytes held by the always-resident metadata index.
    pub fn metadata_footprint_bytes(&self) -> usize {
        self.lock().meta.values().map(|m| m.footprint_bytes()).sum()
    }

    pub fn stats(&self) -> CacheStats {
        self.lock().stats.clone()
    }

    pub fn reset_stats(&self) {
        self.lock().stats = CacheStats::default();
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.lock().trace)
    }

    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<()> {
        for ev in self.lock().trace.iter() {
            writeln!(w, "{}", ev.to_line())?;
        }
        Ok(())
    }
}

/// Loads every handle in order and returns the resulting statistics.
pub fn replay_trace(store: &TieredBlockStore, trace: &[BlockHandle]) -> Result<CacheStats> {
    for h in trace {
        store.load_block(h.block_id, h.layer_id)?;
    }
    Ok(store.stats())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn tiny(id: u64, request: u64, layer: u32) -> KVBlock {
        KVBlock::new(BlockId(id), request, layer, 2, vec![id as f32, 1.0], vec![0.5, id as f32]).unwrap()
    }

    fn store(cap: usize, layers: u32, policy: PoolPolicy) -> TieredBlockStore {
        TieredBlockStore::new(StoreConfig {
            fast_capacity_slots: cap,
            n_layers: layers,
            block_size: 1,
            policy,
            write_allocate: false,
            record_trace: true,
            ..StoreConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn put_get_roundtrip() {
        let s = store(4, 1, PoolPolicy::Unified);
        let b = tiny(3, 0, 0);
        s.put_block(b.clone()).unwrap();
        assert_eq!(*s.load_block(BlockId(3), 0).unwrap(), b);
        assert!(matches!(s.put_block(b), Err(PsaError::DuplicateBlock(_))));
        assert!(matches!(s.load_block(BlockId(9), 0), Err(PsaError::UnknownBlock(_))));
    }

    #[test]
    fn backing_holds_everything_fast_tier_bounded() {
        let s = TieredBlockStore::new(StoreConfig {
            fast_capacity_slots: 3,
            block_size: 1,
            ..StoreConfig::default()
        })
        .unwrap();
        for i in 0..10 {
            s.put_block(tiny(i, 0, 0)).unwrap();
        }
        assert_eq!(s.block_count(), 10);
        let u = s.slot_usage()[0];
        assert_eq!(u.occupied, 3);
        assert_eq!(u.occupied + u.free, u.capacity);
        // write-allocate keeps the newest blocks resident
        assert!(s.is_resident(BlockId(9)) && !s.is_resident(BlockId(0)));
    }

    #[test]
    fn second_load_hits() {
        let s = store(4, 1, PoolPolicy::Unified);
        s.put_block(tiny(1, 0, 0)).unwrap();
        s.load_block(BlockId(1), 0).unwrap();
        s.load_block(BlockId(1), 0).unwrap();
        let st = s.stats();
        assert_eq!((st.hits, st.misses), (1, 1));
        assert_eq!(st.bytes_transferred, 2 * 2 * 4);
    }

    #[test]
    fn textbook_lru() {
        let s = store(2, 1, PoolPolicy::Unified);
        for i in 0..3 {
            s.put_block(tiny(i, 0, 0)).unwrap();
        }
        for id in [0, 1, 2, 0] {
            s.load_block(BlockId(id), 0).unwrap();
        }
        let trace = s.take_trace();
        let lines: Vec<String> = trace.iter().map(TraceEvent::to_line).collect();
        assert_eq!(
            lines,
            vec!["0,0,0,miss,-", "1,0,1,miss,-", "2,0,2,miss,0", "3,0,0,miss,1"]
        );
        assert_eq!(s.stats().per_layer[&0].misses, 4);
    }

    #[test]
    fn fifo_ignores_recency() {
        let s = TieredBlockStore::new(StoreConfig {
            fast_capacity_slots: 2,
            block_size: 1,
            eviction: EvictionPolicy::Fifo,
            write_allocate: false,
            ..StoreConfig::default()
        })
        .unwrap();
        for i in 0..3 {
            s.put_block(tiny(i, 0, 0)).unwrap();
        }
        // A B A C: FIFO evicts A despite its recent use; LRU would evict B.
        for id in [0, 1, 0, 2] {
            s.load_block(BlockId(id), 0).unwrap();
        }
        assert!(!s.is_resident(BlockId(0)));
        assert!(s.is_resident(BlockId(1)));
    }

    #[test]
    fn partitioned_layers_do_not_share_slots() {
        let s = store(4, 2, PoolPolicy::LayerPartitioned);
        for i in 0..4 {
            s.put_block(tiny(i, 0, 0)).unwrap();
        }
        s.put_block(tiny(10, 0, 1)).unwrap();
        for id in 0..4 {
            s.load_block(BlockId(id), 0).unwrap();
        }
        s.load_block(BlockId(10), 1).unwrap();
        let usage = s.slot_usage();
        assert_eq!(usage.len(), 2);
        assert_eq!(usage[0].occupied, 2);
        assert_eq!(usage[1].occupied, 1);
        assert!(s.load_block(BlockId(10), 0).is_err());
    }

    #[test]
    fn release_frees_exactly_owned_slots() {
        let s = store(8, 1, PoolPolicy::Unified);
        for i in 0..3 {
            s.put_block(tiny(i, 1, 0)).unwrap();
        }
        for i in 3..5 {
            s.put_block(tiny(i, 2, 0)).unwrap();
        }
        for i in 0..5 {
            s.load_block(BlockId(i), 0).unwrap();
        }
        assert_eq!(s.release_request(1).unwrap(), 3);
        assert_eq!(s.slot_usage()[0].occupied, 2);
        assert!(matches!(s.load_block(BlockId(0), 0), Err(PsaError::UnknownBlock(_))));
        assert!(s.metadata(BlockId(1)).is_err());
        assert!(s.load_block(BlockId(3), 0).is_ok());
        assert!(matches!(s.release_request(1), Err(PsaError::UnknownRequest(1))));
    }

    #[test]
    fn metadata_index_grows_by_d_per_block() {
        for block_size in [1usize, 8, 64] {
            let s = TieredBlockStore::new(StoreConfig {
                block_size,
                ..StoreConfig::default()
            })
            .unwrap();
            let d = 16;
            let mut last = 0;
            for i in 0..5u64 {
                let n = block_size * d;
                s.put_block(KVBlock::new(BlockId(i), 0, 0, d, vec![1.0; n], vec![1.0; n]).unwrap())
                    .unwrap();
                let now = s.metadata_footprint_bytes();
                assert_eq!(now - last, 3 * d * 4);
                last = now;
            }
        }
    }

    #[test]
    fn oversize_block_rejected() {
        let s = store(4, 1, PoolPolicy::Unified);
        let b = KVBlock::new(BlockId(0), 0, 0, 1, vec![1.0, 2.0], vec![1.0, 2.0]).unwrap();
        assert!(s.put_block(b).is_err());
    }

    // Reference LRU: a deque ordered by recency.
    fn reference_lru(cap: usize, trace: &[u64]) -> Vec<Option<u64>> {
        let mut q: VecDeque<u64> = VecDeque::new();
        trace
            .iter()
            .map(|&id| {
                if let Some(pos) = q.iter().position(|&x| x == id) {
                    q.remove(pos);
                    q.push_back(id);
                    None
                } else {
                    let victim = if q.len() == cap { q.pop_front() } else { None };
                    q.push_back(id);
                    victim
                }
            })
            .collect()
    }

    proptest::proptest! {
        #[test]
        fn lru_matches_reference(trace in proptest::collection::vec(0u64..12, 1..200), cap in 1usize..8) {
            let s = store(cap, 1, PoolPolicy::Unified);
            for i in 0..12 {
                s.put_block(tiny(i, 0, 0)).unwrap();
            }
            for &id in &trace {
                s.load_block(BlockId(id), 0).unwrap();
                let u = s.slot_usage()[0];
                proptest::prop_assert_eq!(u.occupied + u.free, cap);
            }
            let got: Vec<Option<u64>> = s.take_trace().iter().map(|e| e.evicted.map(|b| b.0)).collect();
            proptest::prop_assert_eq!(got, reference_lru(cap, &trace));
            let st = s.stats();
            proptest::prop_assert_eq!(st.hits + st.misses, trace.len() as u64);
        }
    }
}
