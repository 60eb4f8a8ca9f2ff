//! Every runnable example doubles as a smoke test.

#[path = "../examples/exact_vs_progressive.rs"]
mod exact_vs_progressive;

#[test]
fn exact_vs_progressive_runs() {
    exact_vs_progressive::run_example().expect("exact_vs_progressive example should run");
}

#[path = "../examples/progressive_walkthrough.rs"]
mod progressive_walkthrough;

#[test]
fn progressive_walkthrough_runs() {
    progressive_walkthrough::run_example().expect("progressive_walkthrough example should run");
}

#[path = "../examples/topk_vs_psa.rs"]
mod topk_vs_psa;

#[test]
fn topk_vs_psa_runs() {
    topk_vs_psa::run_example().expect("topk_vs_psa example should run");
}

#[path = "../examples/unified_pool.rs"]
mod unified_pool;

#[test]
fn unified_pool_runs() {
    unified_pool::run_example().expect("unified_pool example should run");
}

#[path = "../examples/pipelined_overlap.rs"]
mod pipelined_overlap;

#[test]
fn pipelined_overlap_runs() {
    pipelined_overlap::run_example().expect("pipelined_overlap example should run");
}

#[path = "../examples/serving_sim.rs"]
mod serving_sim;

#[test]
fn serving_sim_runs() {
    serving_sim::run_example().expect("serving_sim example should run");
}

#[path = "../examples/merge_algebra.rs"]
mod merge_algebra;

#[test]
fn merge_algebra_runs() {
    merge_algebra::run_example().expect("merge_algebra example should run");
}
