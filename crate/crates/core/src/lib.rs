//! Progressive sparse attention over a tiered KV-block store.
//!
//! Decode-time attention is computed block by block, most critical first, and
//! stops as soon as the processed blocks provably (under oracle ranking) or
//! estimably (under metadata ranking) cover a target fraction of the softmax
//! mass. Around that engine sit the pieces needed to study it: an exact
//! double-precision oracle, a top-k baseline, a two-tier block store with
//! unified or per-layer LRU pools, a pipelined loader/compute executor, a
//! small decode-serving simulator, and the scenario runner behind the
//! `psa-bench` binary.

pub mod attention;
pub mod bench;
pub mod config;
pub mod engine;
pub mod error;
pub mod metadata;
pub mod pipeline;
pub mod serving;
pub mod store;
pub mod workload;

pub use attention::{
    block_partial_attention, exact_attention, exact_attention_blocks, finalize, merge_partial,
    HeadVector, ScoredBlockResult, SoftmaxAccumulator,
};
pub use engine::{
    psa_attention, psa_attention_batched, psa_attention_heads, topk_attention, BatchQuery,
    CoverageEstimator, PsaConfig, PsaResult, RankingMode,
};
pub use error::{PsaError, Result};
pub use metadata::{build_metadata, criticality_score, rank_blocks, BlockId, BlockMetadata, Estimator, KVBlock};
pub use pipeline::{run_pipelined, run_sequential, PipelineOptions, PipelineTimings, StopSignal};
pub use store::{BlockHandle, CacheStats, EvictionPolicy, PoolPolicy, StoreConfig, TieredBlockStore};
