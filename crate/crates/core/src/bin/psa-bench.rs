use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psa::bench::{self, EquivalenceOptions};

#[derive(Parser)]
#[command(name = "psa-bench", about = "Progressive sparse attention benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare exact, PSA and top-k attention on a scenario.
    Run { scenario: PathBuf },
    /// Block budgets of PSA vs the best uniform top-k at fixed coverage.
    Tradeoff { scenario: PathBuf },
    /// Oracle self test of the attention and merge paths.
    Equivalence {
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 128)]
        blocks: usize,
        #[arg(long, default_value_t = 32)]
        block_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the engine output (negative control).
        #[arg(long)]
        corrupt: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario } => bench::cmd_run(&scenario).map(|(report, path)| {
            println!("{} methods -> {}", report.rows.len(), path.display());
            0
        }),
        Command::Tradeoff { scenario } => bench::cmd_tradeoff(&scenario).map(|(report, path)| {
            for r in &report.rows {
                println!(
                    "target {}: uniform k {} vs psa {:.2} blocks (reduction {:.3})",
                    r.target, r.uniform_k, r.psa_mean_blocks, r.reduction
                );
            }
            println!("-> {}", path.display());
            0
        }),
        Command::Equivalence { d, blocks, block_size, seed, corrupt } => {
            let opts = EquivalenceOptions {
                d,
                blocks,
                block_size,
                seed,
                corrupt,
                ..EquivalenceOptions::default()
            };
            bench::equivalence(&opts).map(|r| {
                print!("{}", r.summary());
                if r.passed { 0 } else { 2 }
            })
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("psa-bench: {e}");
            ExitCode::from(bench::exit_code(&e) as u8)
        }
    }
}
