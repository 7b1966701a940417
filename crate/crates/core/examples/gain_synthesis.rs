// Riccati gains and the delay-robust stability certificate of the
// three-tank loop.

use delaymark::config::ExperimentConfig;
use delaymark::experiment::synthesize_report;

pub fn run_example() -> delaymark::Result<()> {
    let report = synthesize_report(&ExperimentConfig::three_tank())?;
    print!("{report}");

    assert!(report.filter_residual < 1e-10 && report.control_residual < 1e-10);
    let cert = report.certificate.as_ref().expect("delay-free loop is stable");
    println!("margin 1 - (alpha + beta) = {:.4}", cert.margin());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
