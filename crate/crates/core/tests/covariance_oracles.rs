use approx::assert_relative_eq;
use delaymark::config::ExperimentConfig;
use delaymark::covariance::{asymptotic_covariance, build_noise_moments, MomentConvention};
use delaymark::experiment::{analyze, attacked_uplift, AnalyzeOptions};
use delaymark::sim::{simulate_drive_response, AttackScenario, SimulationConfig};
use delaymark::stats::Estimate;
use delaymark::synthesis::{DelayDistribution, NoiseModel};
use delaymark::{Matrix, SolverOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

// current-slot covariance of the scalar attacked loop, upper triangle
const TOP_SLOT: [[f64; 4]; 4] = [
    [2.994011250681, 0.095530186728, 0.075642882264, 0.075642882264],
    [0.0, 0.100941515080, 0.081049833715, 0.081049833715],
    [0.0, 0.0, 0.466463248135, 0.102938025346],
    [0.0, 0.0, 0.0, 0.102938025346],
];

#[test]
fn scalar_attacked_covariance_is_frozen() {
    let report = analyze(
        &ExperimentConfig::scalar_attack(),
        &AnalyzeOptions {
            runs: 0,
            ..AnalyzeOptions::default()
        },
    )
    .unwrap();
    let top = report.covariance.top_slot();
    for i in 0..4 {
        for j in i..4 {
            assert_relative_eq!(top[(i, j)], TOP_SLOT[i][j], epsilon = 1e-6);
            assert_relative_eq!(top[(j, i)], top[(i, j)], epsilon = 1e-10);
        }
    }
    assert_relative_eq!(report.prediction.mean, 11.991486, epsilon = 1e-5);
    assert_relative_eq!(report.prediction.excess_per_step(), 0.090135, epsilon = 1e-6);
    assert_relative_eq!(report.penalty, 0.397424, epsilon = 1e-6);
}

#[test]
fn shifted_lag_weights_give_a_different_covariance() {
    let mut cfg = ExperimentConfig::scalar_attack();
    cfg.analysis.convention = MomentConvention::ShiftedLag;
    let report = analyze(
        &cfg,
        &AnalyzeOptions {
            runs: 0,
            ..AnalyzeOptions::default()
        },
    )
    .unwrap();
    assert_relative_eq!(report.prediction.mean, 11.9060, epsilon = 1e-4);
}

/// `E[ℕ_{t−l} ℕ_tᵀ]` over the three delayed-measurement slots, conditioned
/// on the current delays, from sampled delays and replayed noise.
fn sampled_lag_moment(
    real: &DelayDistribution,
    attack: &DelayDistribution,
    sigma_v: f64,
    l: usize,
    tau: usize,
    tau_attack: usize,
    samples: usize,
    seed: u64,
) -> (Matrix, Matrix) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma_v.sqrt()).unwrap();
    let (sr, sa) = (real.sampler(), attack.sampler());
    let span = l + real.max_delay().max(attack.max_delay()) + 1;
    let mut sum = Matrix::zeros(3, 2);
    let mut sum_sq = Matrix::zeros(3, 2);
    let mut v = vec![0.0; span];
    for _ in 0..samples {
        // v[k] holds v′_{t−k}
        v.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        let (past_real, past_attack) = (sr.sample(&mut rng), sa.sample(&mut rng));
        let now = [v[tau], v[tau_attack]];
        let past = [v[l], v[l + past_real], v[l + past_attack]];
        for i in 0..3 {
            for j in 0..2 {
                let p = past[i] * now[j];
                sum[(i, j)] += p;
                sum_sq[(i, j)] += p * p;
            }
        }
    }
    let n = samples as f64;
    let mean = &sum / n;
    let se = (&sum_sq / n - mean.component_mul(&mean)).map(|x| (x.max(0.0) / n).sqrt());
    (mean, se)
}

#[test]
fn lag_moments_match_sampled_noise() {
    let real = DelayDistribution::uniform(1, 3).unwrap();
    let attack = DelayDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
    let sigma_v = 0.4;
    let noise = NoiseModel::new(Matrix::identity(1, 1) * 0.3, Matrix::identity(1, 1) * sigma_v).unwrap();
    let moments = build_noise_moments(&noise, &real, &attack, MomentConvention::Stationary).unwrap();
    let mut seed = 0;
    for l in 1..=3 {
        for tau in 1..=3 {
            for tau_a in 1..=3 {
                seed += 1;
                let phi = moments.lag_moment(l, tau, tau_a);
                let (mean, se) = sampled_lag_moment(&real, &attack, sigma_v, l, tau, tau_a, 40_000, seed);
                for i in 0..3 {
                    for j in 0..2 {
                        // slots: w, w′, v′_t, v′_{t−τ}, v′_{t−τ′}
                        let exact = phi[(2 + i, 3 + j)];
                        let z = (mean[(i, j)] - exact).abs() / se[(i, j)].max(1e-12);
                        assert!(z <= 4.0, "l={l} τ={tau} τ′={tau_a} ({i},{j}): exact {exact}, sampled {} ± {}", mean[(i, j)], se[(i, j)]);
                    }
                }
            }
        }
    }
}

#[test]
fn time_average_matches_the_fixed_point() {
    let cfg = ExperimentConfig::scalar_attack();
    let design = cfg.design().unwrap();
    let up = attacked_uplift(&design).unwrap();
    let delays = design.watermark.delays().unwrap();
    let moments = build_noise_moments(&design.noise, delays, delays, MomentConvention::Stationary).unwrap();
    let exact = asymptotic_covariance(&up, &moments, &SolverOptions::default()).unwrap().top_slot();

    let burn_in = 1000;
    let sim = SimulationConfig::new(burn_in + 400_000, 99).with_scenario(AttackScenario::virtual_system(0));
    let states = simulate_drive_response(&design, &sim).unwrap();
    let tail = &states[burn_in..];
    for i in 0..4 {
        for j in i..4 {
            let xs: Vec<f64> = tail.iter().map(|z| z[i] * z[j]).collect();
            let e = Estimate::batch_means(&xs, 100);
            assert!(e.within(exact[(i, j)], 3.0), "({i},{j}): exact {}, time average {e:?}", exact[(i, j)]);
        }
    }
}
