//! Adaptive budgets versus a uniform top-k budget.
//!
//! Runs the fixed-coverage comparison on a bimodal workload (half the
//! queries concentrate on 4 blocks, half on 40) and on a workload where every
//! query looks alike. A uniform k must be sized for the worst query, while
//! PSA spends only what each query needs.
//!
//! ```bash
//! cargo run -p psa --example topk_vs_psa
//! ```

use psa::bench::tradeoff;
use psa::config::ScenarioConfig;

fn scenario(name: &str, planted: &str) -> psa::Result<ScenarioConfig> {
    ScenarioConfig::parse(
        &format!(
            "[workload]\n\
             n_requests = 16\n\
             n_layers = 1\n\
             context_len = 4096\n\
             decode_steps = 1\n\
             skew = 8.0\n\
             planted_blocks = {planted}\n\
             seed = 5\n\
             [engine]\n\
             microbatch_size = 1\n\
             [store]\n\
             fast_capacity_slots = 4096\n\
             [tradeoff]\n\
             targets = 0.9, 0.95\n"
        ),
        name,
    )
}

pub fn run_example() -> psa::Result<()> {
    for (name, planted) in [("bimodal", "4, 40"), ("uniform", "16")] {
        let report = tradeoff(&scenario(name, planted)?)?;
        println!("{name}: {} queries, {} blocks each", report.n_queries, report.mean_blocks_per_query);
        for row in &report.rows {
            println!(
                "  coverage {:.2}: uniform k = {:>3}, psa mean {:>6.2} blocks (min coverage {:.4}), ratio {:.3}",
                row.target, row.uniform_k, row.psa_mean_blocks, row.psa_min_coverage, row.reduction
            );
        }
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
