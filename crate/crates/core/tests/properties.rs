mod common;

use common::mat;
use delaymark::checks::random_design;
use delaymark::config::ExperimentConfig;
use delaymark::detect::{analytic_cost_penalty, chi2_series, detection_rate_curve, DetectorConfig};
use delaymark::linalg::{self, kron, lyapunov_residual, solve_discrete_lyapunov, unvec, vec};
use delaymark::sim::{run_nominal, SimulationConfig};
use delaymark::stability::{mean_dynamics_rollout, stability_certificate, MatrixNorm};
use delaymark::synthesis::{LoopDesign, LqgCost, LtiPlant, NoiseModel, Watermark};
use delaymark::{Matrix, SolverOptions, Vector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn normal_matrix(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn riccati_solutions_satisfy_their_equations(seed in any::<u64>()) {
        let design = random_design(&mut rng(seed), 4, 3).unwrap();
        let scale = 1.0 + linalg::max_abs(&design.kalman.p) + linalg::max_abs(&design.lqg.delta);
        prop_assert!(design.kalman.invariant_error(&design.plant, &design.noise).unwrap() < 1e-9 * scale);
        prop_assert!(design.lqg.invariant_error(&design.plant).unwrap() < 1e-9 * scale);
    }

    #[test]
    fn kronecker_vec_identity(seed in any::<u64>(), m in 1usize..5, n in 1usize..5, p in 1usize..5, q in 1usize..5) {
        let mut r = rng(seed);
        let a = normal_matrix(&mut r, m, n);
        let x = normal_matrix(&mut r, n, p);
        let b = normal_matrix(&mut r, p, q);
        let lhs = vec(&(&a * &x * &b));
        let rhs = kron(&b.transpose(), &a) * vec(&x);
        prop_assert!((lhs - rhs).amax() < 1e-12);
        prop_assert_eq!(unvec(&vec(&x), n, p).unwrap(), x);
    }

    #[test]
    fn lyapunov_residual_is_small(seed in any::<u64>(), n in 1usize..8, rho in 0.05f64..0.97) {
        let mut r = rng(seed);
        let mut a = normal_matrix(&mut r, n, n);
        let radius = linalg::spectral_radius(&a).unwrap();
        if radius > 1e-9 {
            a *= rho / radius;
        }
        let f = normal_matrix(&mut r, n, n);
        let c = &f * f.transpose() + Matrix::identity(n, n);
        let h = solve_discrete_lyapunov(&a, &c, &SolverOptions::default()).unwrap();
        prop_assert!(lyapunov_residual(&a, &c, &h) < 1e-10 * (1.0 + linalg::max_abs(&h)));
        prop_assert!(linalg::symmetric_eigenvalue_range(&h).0 > 0.0);
    }

    #[test]
    fn whitened_residuals_ignore_output_units(s1 in 0.1f64..10.0, s2 in 0.1f64..10.0, seed in 0u64..1000) {
        let plant = |c: Matrix| LtiPlant::new(mat(2, 2, &[0.9, 0.2, 0.0, 0.7]), mat(2, 1, &[0.0, 1.0]), c).unwrap();
        let c = mat(2, 2, &[1.0, 0.0, 0.3, 1.0]);
        let sigma_v = mat(2, 2, &[0.1, 0.0, 0.0, 0.2]);
        let s = Matrix::from_diagonal(&Vector::from_vec(vec![s1, s2]));
        let build = |c: Matrix, sv: Matrix| {
            let noise = NoiseModel::new(Matrix::identity(2, 2) * 0.3, sv).unwrap();
            let cost = LqgCost::new(Matrix::identity(2, 2), Matrix::identity(1, 1)).unwrap();
            LoopDesign::new(plant(c), noise, cost, common::small_delay_watermark(0.2, 3), &SolverOptions::default()).unwrap()
        };
        let base = build(c.clone(), sigma_v.clone());
        let scaled = build(&s * &c, &s * &sigma_v * &s);
        let rel = linalg::max_abs(&(&scaled.kalman.sigma_r - &s * &base.kalman.sigma_r * &s)) / linalg::max_abs(&scaled.kalman.sigma_r);
        prop_assert!(rel < 1e-9);
        let det = DetectorConfig::new(5, 30.0).unwrap();
        let sim = SimulationConfig::new(200, seed);
        let g0 = chi2_series(&run_nominal(&base, &sim).unwrap(), &base, &det).unwrap().g;
        let g1 = chi2_series(&run_nominal(&scaled, &sim).unwrap(), &scaled, &det).unwrap().g;
        for (a, b) in g0.iter().zip(&g1) {
            prop_assert!((a - b).abs() <= 1e-7 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn rate_curve_is_non_increasing_in_threshold(series in prop::collection::vec(prop::collection::vec(0.0f64..50.0, 8), 1..20), lo in 0.0f64..50.0, gap in 0.0f64..20.0) {
        let low = detection_rate_curve(&series, lo).unwrap();
        let high = detection_rate_curve(&series, lo + gap).unwrap();
        for (a, b) in low.iter().zip(&high) {
            prop_assert!(b <= a);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn certificate_beta_scales_with_the_delay_gain(s in 0.0f64..3.0) {
        let design = ExperimentConfig::three_tank().design().unwrap();
        let n = 2 * design.plant.n_x();
        let opts = SolverOptions::default();
        let cert = |gain: Matrix| {
            let wm = match &design.watermark {
                Watermark::DelayFeedback { delays, .. } => Watermark::DelayFeedback { gain, delays: delays.clone() },
                _ => unreachable!(),
            };
            let aug = design.with_watermark(wm).unwrap().augmented();
            stability_certificate(&aug, &Matrix::identity(n, n), MatrixNorm::Spectral, &opts).unwrap()
        };
        let unit = cert(design.delay_gain());
        let scaled = cert(design.delay_gain() * s);
        let expect = s * unit.norm_ahb / unit.eta_min + s * s * unit.norm_bhb / unit.eta_min;
        prop_assert!((scaled.beta - expect).abs() <= 1e-9 * (1.0 + expect));
        prop_assert_eq!(cert(design.delay_gain() * 0.0).beta, 0.0);
    }

    #[test]
    fn penalty_is_quadratic_in_the_gain(s in -3.0f64..3.0, seed in any::<u64>()) {
        let design = random_design(&mut rng(seed), 3, 2).unwrap();
        let k = design.delay_gain();
        let unit = analytic_cost_penalty(&design.lqg, &design.plant, &k).unwrap();
        let scaled = analytic_cost_penalty(&design.lqg, &design.plant, &(&k * s)).unwrap();
        prop_assert!(unit >= 0.0);
        prop_assert!((scaled - s * s * unit).abs() <= 1e-10 * (1.0 + unit * s * s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn certified_loops_decay_under_random_delays(seed in any::<u64>()) {
        let mut r = rng(seed);
        let design = random_design(&mut r, 3, 4).unwrap();
        let aug = design.augmented();
        let n = aug.current.nrows();
        let Ok(cert) = stability_certificate(&aug, &Matrix::identity(n, n), MatrixNorm::Spectral, &SolverOptions::default()) else {
            return Ok(());
        };
        prop_assume!(cert.passes);
        let tau_max = design.watermark.delays().unwrap().max_delay();
        let delays: Vec<usize> = (0..400).map(|_| r.gen_range(1..=tau_max)).collect();
        let x0 = Vector::from_fn(n, |_, _| r.gen_range(-1.0..1.0));
        let report = mean_dynamics_rollout(&aug, &delays, &x0).unwrap();
        prop_assert!(report.rate < 1.0, "rate {}", report.rate);
        prop_assert!(report.sup_norms[400] < report.sup_norms[0]);
    }
}
