use delaymark::config::{ExperimentConfig, WatermarkVariant};
use delaymark::detect::cost_report;
use delaymark::experiment::long_run_cost;
use delaymark::SolverOptions;

/// Analytic and empirical control cost of each watermark on the scalar loop.
pub fn run_example() -> delaymark::Result<()> {
    let cfg = ExperimentConfig::scalar_attack();
    println!("{:<10} {:>10} {:>10} {:>10} {:>10}", "watermark", "J*", "penalty", "J*+pen", "empirical");
    for variant in WatermarkVariant::ALL {
        let design = cfg.design_for(variant)?;
        let j = long_run_cost(&design, 200_000, 1000, 5)?;
        let c = cost_report(&design, j, &SolverOptions::default())?;
        println!(
            "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            c.watermark, c.optimal, c.penalty, c.predicted, c.empirical
        );
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
