// Detection-rate curves and long-run costs of the three watermarks on the
// three-tank loop, with a small ensemble.

use delaymark::config::ExperimentConfig;
use delaymark::experiment::{cmd_bench, BenchOptions};

pub fn run_example() -> delaymark::Result<()> {
    let out = std::env::temp_dir().join("delaymark_bench_example");
    let opts = BenchOptions {
        seed: Some(3),
        runs: Some(24),
        cost_horizon: Some(100_000),
    };
    let (report, manifest) = cmd_bench(&ExperimentConfig::three_tank(), &out, &opts)?;
    print!("{report}");
    println!("wrote {} files to {}", manifest.files.len(), out.display());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
