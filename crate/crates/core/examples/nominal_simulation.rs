use delaymark::detect::{chi2_series, empirical_cost, DetectorConfig};
use delaymark::sim::{run_nominal, SimulationConfig};
use delaymark::synthesis::{DelayDistribution, LoopDesign, LqgCost, LtiPlant, NoiseModel, Watermark};
use delaymark::{Matrix, SolverOptions};

/// A scalar loop with random feedback delays, simulated without attack.
pub fn run_example() -> delaymark::Result<()> {
    let s = |v: f64| Matrix::from_element(1, 1, v);
    let plant = LtiPlant::new(s(0.9), s(1.0), s(1.0))?;
    let noise = NoiseModel::new(s(0.3), s(0.1))?;
    let cost = LqgCost::new(s(1.0), s(1.0))?;
    let watermark = Watermark::DelayFeedback {
        gain: s(0.4),
        delays: DelayDistribution::uniform(1, 5)?,
    };
    let design = LoopDesign::new(plant, noise, cost, watermark, &SolverOptions::default())?;

    let trace = run_nominal(&design, &SimulationConfig::new(20_000, 42))?;
    let j = empirical_cost(&trace, &design.cost.q, &design.cost.r, 1000)?;
    println!("empirical cost over {} steps: {j:.4}", trace.len() - 1000);

    let det = DetectorConfig::new(10, 30.0)?;
    let report = chi2_series(&trace, &design, &det)?;
    let mean = report.summary.mean_pre_attack.unwrap_or(f64::NAN);
    println!("mean g = {mean:.3} (clean value {})", det.degrees_of_freedom(1));

    let path = std::env::temp_dir().join("delaymark_nominal_trace.csv");
    trace.write_csv(std::fs::File::create(&path)?)?;
    println!("trace written to {}", path.display());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
