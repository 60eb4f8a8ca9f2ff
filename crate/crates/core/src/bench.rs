//! Scenario runner behind `psa-bench`: method comparison, the fixed-coverage
//! trade-off against uniform top-k, and the oracle-equivalence self test.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    block_partial_attention, exact_attention_blocks, max_relative_error, SoftmaxAccumulator,
};
use crate::config::{ReportFormat, ScenarioConfig};
use crate::engine::{psa_attention, rank_handles, topk_attention, PsaConfig};
use crate::error::{PsaError, Result};
use crate::metadata::{BlockId, KVBlock};
use crate::serving::{run_serving, AttentionMethod, ServingReport};
use crate::store::{BlockHandle, StoreConfig, TieredBlockStore};
use crate::workload::{generate_workload, Request};

/// Overrides the directory that report files are written to.
pub const OUT_DIR_ENV: &str = "PSA_BENCH_OUT_DIR";

pub const CSV_HEADER: &str = "method,param,mean_blocks,p99_blocks,kv_fraction,mean_coverage,min_coverage,hit_ratio,tbt_p50_ms,tbt_p99_ms,overlap_eff";

pub const TRADEOFF_CSV_HEADER: &str = "target,uniform_k,topk_mean_blocks,topk_min_coverage,psa_mean_blocks,psa_mean_coverage,psa_min_coverage,reduction";

/// Maximum relative error tolerated by the equivalence self test.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

/// Exit code for a failed command: 2 for invariant or tolerance failures,
/// 1 for everything else (bad config, unschedulable workload, I/O).
pub fn exit_code(err: &PsaError) -> i32 {
    match err {
        PsaError::Invariant(_) => 2,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub param: String,
    pub mean_blocks: f64,
    pub p99_blocks: f64,
    pub kv_fraction: f64,
    pub mean_coverage: f64,
    pub min_coverage: f64,
    pub hit_ratio: f64,
    pub tbt_p50_ms: f64,
    pub tbt_p99_ms: f64,
    pub overlap_eff: f64,
}

impl ComparisonRow {
    fn from_report(method: &str, param: String, r: &ServingReport) -> Self {
        ComparisonRow {
            method: method.to_string(),
            param,
            mean_blocks: r.blocks_per_query.mean,
            p99_blocks: r.blocks_per_query.p99,
            kv_fraction: r.kv_fraction,
            mean_coverage: r.mean_true_coverage.unwrap_or(f64::NAN),
            min_coverage: r.min_true_coverage.unwrap_or(f64::NAN),
            hit_ratio: r.hit_ratio,
            tbt_p50_ms: r.tbt_ms.p50,
            tbt_p99_ms: r.tbt_ms.p99,
            overlap_eff: r.overlap_efficiency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub scenario: String,
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.method,
                r.param,
                r.mean_blocks,
                r.p99_blocks,
                r.kv_fraction,
                r.mean_coverage,
                r.min_coverage,
                r.hit_ratio,
                r.tbt_p50_ms,
                r.tbt_p99_ms,
                r.overlap_eff
            );
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        Ok(match format {
            ReportFormat::Json => serde_json::to_string_pretty(self)? + "\n",
            ReportFormat::Csv => self.to_csv(),
        })
    }

    pub fn row(&self, method: &str, param: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method && r.param == param)
    }
}

fn audited(engine: &PsaConfig) -> PsaConfig {
    PsaConfig {
        audit: true,
        ..engine.clone()
    }
}

/// Runs the serving loop once per method: exact, PSA at every swept epsilon,
/// and top-k at every swept k. Each run gets a fresh store.
pub fn compare(cfg: &ScenarioConfig) -> Result<ComparisonReport> {
    let requests = generate_workload(&cfg.workload)?;
    compare_on(cfg, &requests)
}

pub fn compare_on(cfg: &ScenarioConfig, requests: &[Request]) -> Result<ComparisonReport> {
    let engine = audited(&cfg.engine);
    let mut rows = Vec::new();

    let exact = run_serving(requests, AttentionMethod::Exact, &engine, &cfg.store, &cfg.batching)?;
    rows.push(ComparisonRow::from_report("exact", "all".into(), &exact));
    for &eps in &cfg.epsilons {
        let e = PsaConfig {
            epsilon: eps,
            ..engine.clone()
        };
        let r = run_serving(requests, AttentionMethod::Psa, &e, &cfg.store, &cfg.batching)?;
        rows.push(ComparisonRow::from_report("psa", eps.to_string(), &r));
    }
    for &k in &cfg.ks {
        let r = run_serving(requests, AttentionMethod::TopK(k), &engine, &cfg.store, &cfg.batching)?;
        rows.push(ComparisonRow::from_report("topk", k.to_string(), &r));
    }
    Ok(ComparisonReport {
        scenario: cfg.name.clone(),
        seed: cfg.workload.seed,
        rows,
    })
}

/// Where a report should be written, honoring [`OUT_DIR_ENV`].
pub fn resolve_output(path: &Path, out_dir: Option<&Path>) -> PathBuf {
    match out_dir {
        Some(dir) => dir.join(path.file_name().unwrap_or(path.as_os_str())),
        None => path.to_path_buf(),
    }
}

fn env_out_dir() -> Option<PathBuf> {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)
}

fn write_report(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, body)?;
    Ok(())
}

/// `run <cfg>`: comparison report written to the configured output path.
pub fn cmd_run(scenario: &Path) -> Result<(ComparisonReport, PathBuf)> {
    let cfg = ScenarioConfig::load(scenario)?;
    let report = compare(&cfg)?;
    let path = resolve_output(&cfg.output_path, env_out_dir().as_deref());
    write_report(&path, &report.render(cfg.format)?)?;
    Ok((report, path))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub target: f64,
    /// Smallest k whose worst query reaches the target.
    pub uniform_k: usize,
    /// Worst-query true coverage at `uniform_k - 1`; `None` when k is 1.
    pub worst_coverage_below_k: Option<f64>,
    pub topk_mean_blocks: f64,
    pub topk_min_coverage: f64,
    pub psa_mean_blocks: f64,
    pub psa_mean_coverage: f64,
    pub psa_min_coverage: f64,
    /// `topk_mean_blocks / psa_mean_blocks`.
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffReport {
    pub scenario: String,
    pub seed: u64,
    pub n_queries: usize,
    pub mean_blocks_per_query: f64,
    pub rows: Vec<TradeoffRow>,
}

impl TradeoffReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRADEOFF_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.target,
                r.uniform_k,
                r.topk_mean_blocks,
                r.topk_min_coverage,
                r.psa_mean_blocks,
                r.psa_mean_coverage,
                r.psa_min_coverage,
                r.reduction
            );
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        Ok(match format {
            ReportFormat::Json => serde_json::to_string_pretty(self)? + "\n",
            ReportFormat::Csv => self.to_csv(),
        })
    }
}

/// One query's ranked blocks with prefix sums of true attention mass.
struct CoverageCurve {
    /// `log_prefix[k]` = log of the mass of the first `k` ranked blocks.
    log_prefix: Vec<f64>,
}

impl CoverageCurve {
    fn n(&self) -> usize {
        self.log_prefix.len() - 1
    }

    fn coverage(&self, k: usize) -> f64 {
        let k = k.min(self.n());
        (self.log_prefix[k] - self.log_prefix[self.n()]).exp()
    }

    /// Full coverage is only granted when every block is included.
    fn meets(&self, k: usize, target: f64) -> bool {
        k >= self.n() || (target < 1.0 && self.coverage(k) >= target)
    }
}

struct QuerySet {
    store: TieredBlockStore,
    queries: Vec<(Vec<f32>, Vec<BlockHandle>)>,
}

fn build_query_set(requests: &[Request], cfg: &ScenarioConfig) -> Result<QuerySet> {
    let total: usize = requests.iter().map(|r| r.blocks.iter().map(Vec::len).sum::<usize>()).sum();
    let store = TieredBlockStore::new(StoreConfig {
        fast_capacity_slots: total.max(cfg.store.n_layers as usize),
        write_allocate: false,
        record_trace: false,
        policy: crate::store::PoolPolicy::Unified,
        ..cfg.store.clone()
    })?;
    let mut queries = Vec::new();
    for r in requests {
        for block in r.blocks.iter().flatten() {
            store.put_block(block.clone())?;
        }
        for step in &r.queries {
            for (layer, q) in step.iter().enumerate() {
                queries.push((q.as_slice().to_vec(), r.handles(layer)));
            }
        }
    }
    Ok(QuerySet { store, queries })
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fixed-coverage comparison of PSA against the best uniform top-k budget.
pub fn tradeoff(cfg: &ScenarioConfig) -> Result<TradeoffReport> {
    let requests = generate_workload(&cfg.workload)?;
    tradeoff_on(cfg, &requests)
}

pub fn tradeoff_on(cfg: &ScenarioConfig, requests: &[Request]) -> Result<TradeoffReport> {
    let engine = audited(&cfg.engine);
    let set = build_query_set(requests, cfg)?;

    let mut curves = Vec::with_capacity(set.queries.len());
    for (q, handles) in &set.queries {
        let scale = engine.scale_for(q.len());
        let ranked = rank_handles(q, handles, &engine, &set.store)?;
        let mut log_prefix = vec![f64::NEG_INFINITY];
        for h in &ranked {
            let las = crate::attention::block_log_as(q, &*set.store.peek_block(h.block_id)?, scale)?;
            log_prefix.push(log_add_exp(*log_prefix.last().expect("nonempty"), las));
        }
        curves.push(CoverageCurve { log_prefix });
    }
    let max_n = curves.iter().map(CoverageCurve::n).max().unwrap_or(0);
    let n_queries = curves.len();

    let mut rows = Vec::new();
    for &target in &cfg.targets {
        let all_meet = |k: usize| curves.iter().all(|c| c.meets(k, target));
        let (mut lo, mut hi) = (1usize, max_n);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if all_meet(mid) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let k = lo;
        if !all_meet(k) || (k > 1 && all_meet(k - 1)) {
            return Err(PsaError::Invariant(format!(
                "uniform k = {k} is not the minimal budget for coverage {target}"
            )));
        }
        let worst_below = (k > 1).then(|| {
            curves
                .iter()
                .map(|c| c.coverage(k - 1))
                .fold(f64::INFINITY, f64::min)
        });

        let psa_cfg = PsaConfig {
            epsilon: target,
            ..engine.clone()
        };
        let (mut psa_blocks, mut psa_cov, mut psa_min) = (0.0, 0.0, f64::INFINITY);
        let (mut topk_blocks, mut topk_min) = (0.0, f64::INFINITY);
        for ((q, handles), curve) in set.queries.iter().zip(&curves) {
            let r = psa_attention(q, handles, &psa_cfg, &set.store)?;
            let cov = r.true_coverage.expect("audited");
            psa_blocks += r.blocks_processed as f64;
            psa_cov += cov;
            psa_min = psa_min.min(cov);
            topk_blocks += k.min(handles.len()) as f64;
            topk_min = topk_min.min(curve.coverage(k));
        }
        let nq = n_queries.max(1) as f64;
        let (psa_mean_blocks, topk_mean_blocks) = (psa_blocks / nq, topk_blocks / nq);
        rows.push(TradeoffRow {
            target,
            uniform_k: k,
            worst_coverage_below_k: worst_below,
            topk_mean_blocks,
            topk_min_coverage: topk_min,
            psa_mean_blocks,
            psa_mean_coverage: psa_cov / nq,
            psa_min_coverage: psa_min,
            reduction: topk_mean_blocks / psa_mean_blocks,
        });
    }

    let total_blocks: usize = curves.iter().map(CoverageCurve::n).sum();
    Ok(TradeoffReport {
        scenario: cfg.name.clone(),
        seed: cfg.workload.seed,
        n_queries,
        mean_blocks_per_query: total_blocks as f64 / n_queries.max(1) as f64,
        rows,
    })
}

/// `tradeoff <cfg>`: written next to the run report as `<stem>_tradeoff.<ext>`.
pub fn cmd_tradeoff(scenario: &Path) -> Result<(TradeoffReport, PathBuf)> {
    let cfg = ScenarioConfig::load(scenario)?;
    let report = tradeoff(&cfg)?;
    let ext = match cfg.format {
        ReportFormat::Json => "json",
        ReportFormat::Csv => "csv",
    };
    let stem = cfg
        .output_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| cfg.name.clone());
    let path = cfg.output_path.with_file_name(format!("{stem}_tradeoff.{ext}"));
    let path = resolve_output(&path, env_out_dir().as_deref());
    write_report(&path, &report.render(cfg.format)?)?;
    Ok((report, path))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceOptions {
    pub d: usize,
    pub blocks: usize,
    pub block_size: usize,
    pub seed: u64,
    pub permutations: usize,
    /// Perturb one engine output; the check must then fail.
    pub corrupt: bool,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        EquivalenceOptions {
            d: 64,
            blocks: 128,
            block_size: 32,
            seed: 0,
            permutations: 20,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub d: usize,
    pub blocks: usize,
    pub block_size: usize,
    pub seed: u64,
    pub psa_full_error: f64,
    pub topk_all_error: f64,
    pub permutation_error: f64,
    pub max_relative_error: f64,
    /// Worst relative error of `exp(log_as)` additivity under merging.
    pub additivity_error: f64,
    pub passed: bool,
}

impl EquivalenceReport {
    pub fn summary(&self) -> String {
        format!(
            "equivalence d={} blocks={} block_size={} seed={}\n\
             psa(eps=1) vs exact: {:.3e}\n\
             topk(k=all) vs exact: {:.3e}\n\
             permuted merges vs exact: {:.3e}\n\
             log_as additivity: {:.3e}\n\
             max relative error: {:.3e} (tolerance {:.0e})\n\
             {}\n",
            self.d,
            self.blocks,
            self.block_size,
            self.seed,
            self.psa_full_error,
            self.topk_all_error,
            self.permutation_error,
            self.additivity_error,
            self.max_relative_error,
            EQUIVALENCE_TOLERANCE,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks that full-coverage PSA, top-k with every block, and merges in
/// random order all reproduce the double-precision oracle.
pub fn equivalence(opts: &EquivalenceOptions) -> Result<EquivalenceReport> {
    if opts.d == 0 || opts.blocks == 0 || opts.block_size == 0 {
        return Err(PsaError::config("d, blocks and block_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let d = opts.d;
    let store = TieredBlockStore::new(StoreConfig {
        fast_capacity_slots: opts.blocks,
        block_size: opts.block_size,
        ..StoreConfig::default()
    })?;
    let mut blocks = Vec::with_capacity(opts.blocks);
    for i in 0..opts.blocks {
        let n = opts.block_size * d;
        let keys: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let values: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let b = KVBlock::new(BlockId(i as u64), 0, 0, d, keys, values)?;
        store.put_block(b.clone())?;
        blocks.push(b);
    }
    let handles: Vec<BlockHandle> = blocks.iter().map(BlockHandle::from).collect();
    let q: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let cfg = PsaConfig {
        epsilon: 1.0,
        block_size: opts.block_size,
        ..PsaConfig::default()
    };
    let scale = cfg.scale_for(d);
    let exact = exact_attention_blocks(&q, &blocks, scale)?;

    let mut psa = psa_attention(&q, &handles, &cfg, &store)?.output.into_inner();
    if opts.corrupt {
        psa[0] += 1.0;
    }
    let psa_full_error = max_relative_error(&psa, &exact);
    let topk = topk_attention(&q, &handles, blocks.len(), &cfg, &store)?;
    let topk_all_error = max_relative_error(&topk.output, &exact);

    let parts = blocks
        .iter()
        .map(|b| block_partial_attention(&q, b, scale))
        .collect::<Result<Vec<_>>>()?;
    let mut permutation_error = 0.0f64;
    let mut additivity_error = 0.0f64;
    let mut order: Vec<usize> = (0..parts.len()).collect();
    for _ in 0..opts.permutations {
        order.shuffle(&mut rng);
        let mut acc = SoftmaxAccumulator::new(d);
        for &i in &order {
            let before = acc.clone();
            acc.merge(&parts[i]);
            if !before.is_empty() {
                let want = before.log_as_acc.exp() + parts[i].log_as.exp();
                additivity_error = additivity_error.max((acc.log_as_acc.exp() - want).abs() / want);
            }
        }
        permutation_error = permutation_error.max(max_relative_error(&acc.finalize()?, &exact));
    }

    let max_relative_error = psa_full_error.max(topk_all_error).max(permutation_error);
    Ok(EquivalenceReport {
        d,
        blocks: opts.blocks,
        block_size: opts.block_size,
        seed: opts.seed,
        psa_full_error,
        topk_all_error,
        permutation_error,
        max_relative_error,
        additivity_error,
        passed: max_relative_error <= EQUIVALENCE_TOLERANCE && additivity_error <= 1e-10,
    })
}
