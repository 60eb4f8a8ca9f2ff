use std::path::PathBuf;
use std::time::{Duration, Instant};

use psa::bench::{compare, tradeoff};
use psa::config::ScenarioConfig;

fn load(name: &str) -> ScenarioConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "scenarios", name].iter().collect();
    ScenarioConfig::load(&path).unwrap()
}

#[test]
fn smoke_is_fast_and_exact_reads_everything() {
    let start = Instant::now();
    let report = compare(&load("smoke.cfg")).unwrap();
    assert!(start.elapsed() < Duration::from_secs(10));
    let exact = report.row("exact", "all").unwrap();
    assert_eq!(exact.kv_fraction, 1.0);
    assert_eq!(exact.min_coverage, 1.0);
    for row in &report.rows {
        assert!(row.kv_fraction > 0.0 && row.kv_fraction <= 1.0);
    }
}

#[test]
fn blocks_accessed_grow_with_epsilon() {
    let mut cfg = load("smoke.cfg");
    cfg.epsilons = vec![0.8, 0.9, 0.95, 0.99];
    cfg.ks.clear();
    let report = compare(&cfg).unwrap();
    let psa: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.method == "psa")
        .map(|r| r.mean_blocks)
        .collect();
    assert_eq!(psa.len(), 4);
    assert!(psa.windows(2).all(|w| w[0] <= w[1]), "{psa:?}");
}

#[test]
fn full_coverage_target_reads_everything() {
    let mut cfg = load("uniform.cfg");
    cfg.workload.n_requests = 4;
    cfg.targets = vec![1.0];
    let report = tradeoff(&cfg).unwrap();
    let row = &report.rows[0];
    assert_eq!(row.uniform_k as f64, report.mean_blocks_per_query);
    assert_eq!(row.psa_mean_blocks, report.mean_blocks_per_query);
    assert_eq!(row.reduction, 1.0);
}

#[test]
fn every_bundled_scenario_parses() {
    for name in ["smoke.cfg", "bimodal.cfg", "uniform.cfg", "reference.cfg"] {
        let cfg = load(name);
        assert_eq!(format!("{}.cfg", cfg.name), name);
    }
}
