//! Partial results merge in any order.
//!
//! Each block yields an unnormalized output plus its softmax statistics.
//! Merging them in a shuffled order gives the same finalized output as the
//! exact oracle, and block masses add up to the whole-context mass.
//!
//! ```bash
//! cargo run -p psa --example merge_algebra
//! ```

use psa::bench::{equivalence, EquivalenceOptions};

pub fn run_example() -> psa::Result<()> {
    for (d, blocks) in [(64, 128), (16, 7), (1, 1)] {
        let report = equivalence(&EquivalenceOptions {
            d,
            blocks,
            permutations: 5,
            ..EquivalenceOptions::default()
        })?;
        print!("{}", report.summary());
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
