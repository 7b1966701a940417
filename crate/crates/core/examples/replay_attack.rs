// Recorded replay against the three-tank loop. The attacker records
// `[6000, 6300)` and replays it in a loop from `t′ = 6500`.

use delaymark::config::ExperimentConfig;
use delaymark::detect::chi2_series;
use delaymark::sim::run_replay_attack;

pub fn run_example() -> delaymark::Result<()> {
    let cfg = ExperimentConfig::three_tank();
    let design = cfg.design()?;
    let det = cfg.detector(design.plant.n_y())?;
    let (real, _) = run_replay_attack(&design, &cfg.simulation(None)?)?;
    let report = chi2_series(&real, &design, &det)?;

    let s = &report.summary;
    println!("threshold psi = {:.2}", det.threshold);
    println!("mean g before the attack: {:.1}", s.mean_pre_attack.unwrap_or(f64::NAN));
    println!("mean g after the attack:  {:.1}", s.mean_post_attack.unwrap_or(f64::NAN));
    match s.first_alarm_after_attack {
        Some(k) => println!("first alarm after the attack at window start {k}"),
        None => println!("no alarm after the attack"),
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
