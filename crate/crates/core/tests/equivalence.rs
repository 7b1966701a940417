mod common;

use approx::assert_relative_eq;
use common::{small_delay_watermark, small_design};
use delaymark::sim::{run_nominal, run_replay_attack, simulate_augmented, simulate_drive_response, simulate_uplifted, AttackScenario, SimulationConfig};
use delaymark::synthesis::assemble_uplifted;
use delaymark::Vector;

#[test]
fn augmented_form_matches_signal_simulation() {
    let design = small_design(small_delay_watermark(0.3, 4));
    let cfg = SimulationConfig::new(400, 21).with_initial(Vector::from_vec(vec![1.0, -2.0]), Vector::from_vec(vec![0.5, 0.0]));
    let trace = run_nominal(&design, &cfg).unwrap();
    let states = simulate_augmented(&design, &cfg).unwrap();
    for (r, z) in trace.records.iter().zip(&states) {
        assert_relative_eq!(r.x, z.rows(0, 2).into_owned(), epsilon = 1e-10, max_relative = 1e-10);
        assert_relative_eq!(r.xhat, z.rows(2, 2).into_owned(), epsilon = 1e-10, max_relative = 1e-10);
    }
}

#[test]
fn drive_response_and_uplift_match_attacked_simulation() {
    let design = small_design(small_delay_watermark(0.3, 3));
    let cfg = SimulationConfig::new(300, 8)
        .with_initial(Vector::from_vec(vec![0.4, 1.0]), Vector::zeros(2))
        .with_scenario(AttackScenario::virtual_system(0));
    let (real, virt) = run_replay_attack(&design, &cfg).unwrap();
    let virt = virt.unwrap();
    let drs = simulate_drive_response(&design, &cfg).unwrap();
    let delays = design.watermark.delays().unwrap();
    let up = assemble_uplifted(&design.drive_response(), delays, delays).unwrap();
    let stacked = simulate_uplifted(&design, &up, &cfg).unwrap();
    for t in 0..cfg.horizon {
        let expect = [&real.records[t].x, &real.records[t].xhat, &virt.records[t].x, &virt.records[t].xhat];
        for (k, e) in expect.iter().enumerate() {
            assert_relative_eq!(**e, drs[t].rows(2 * k, 2).into_owned(), epsilon = 1e-10, max_relative = 1e-10);
        }
        assert_relative_eq!(drs[t], stacked[t].rows(0, 8).into_owned(), epsilon = 1e-10, max_relative = 1e-10);
        for lag in 1..=3 {
            let past = if t >= lag { drs[t - lag].clone() } else { Vector::zeros(8) };
            assert_relative_eq!(past, stacked[t].rows(8 * lag, 8).into_owned(), epsilon = 1e-10, max_relative = 1e-10);
        }
    }
}
