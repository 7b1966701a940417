// Stationary covariance of a scalar loop under a virtual-copy replay,
// computed exactly and checked against a Monte-Carlo ensemble.

use delaymark::config::ExperimentConfig;
use delaymark::experiment::{analyze, AnalyzeOptions};

pub fn run_example() -> delaymark::Result<()> {
    let opts = AnalyzeOptions {
        seed: Some(11),
        runs: 1000,
        horizon: 400,
        noise_scale: 1.0,
    };
    let report = analyze(&ExperimentConfig::scalar_attack(), &opts)?;
    print!("{report}");
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
