//! Stability of the delayed closed loop: a Lyapunov-based certificate for
//! arbitrary bounded delay sequences, noise-free mean rollouts, and spectral
//! checks of the uplifted random-matrix recursion.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::expected_congruence;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SolverOptions, Vector};
use crate::synthesis::{AugmentedSystem, UpliftedSystem};

/// Matrix magnitude used inside the certificate constants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixNorm {
    #[default]
    Spectral,
    Frobenius,
}

impl MatrixNorm {
    pub fn apply(self, m: &Matrix) -> f64 {
        match self {
            MatrixNorm::Spectral => linalg::spectral_norm(m),
            MatrixNorm::Frobenius => m.norm(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    /// Solution of `𝐀ᵀH𝐀 − H = −C`.
    pub h: Matrix,
    pub c_lyap: Matrix,
    /// Smallest eigenvalue of `C`.
    pub c: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    /// `|𝐀ᵀH𝐁|`
    pub norm_ahb: f64,
    /// `|𝐁ᵀH𝐁|`
    pub norm_bhb: f64,
    pub alpha: f64,
    pub beta: f64,
    pub norm: MatrixNorm,
    pub passes: bool,
}

impl StabilityCertificate {
    pub fn margin(&self) -> f64 {
        1.0 - (self.alpha + self.beta)
    }
}

/// Sufficient condition for exponential decay of `𝐱_{t+1} = 𝐀𝐱_t + 𝐁𝐱_{t−τ_t}`
/// under every delay sequence bounded by the maximum delay.
///
/// With `H` from the Lyapunov equation, `c = λmin(C)` and `η` the extreme
/// eigenvalues of `H`:
///
/// ```text
/// α = |η_max − c + |𝐀ᵀH𝐁|| / η_max   if c > |𝐀ᵀH𝐁|
///     |η_min − c + |𝐀ᵀH𝐁|| / η_min   otherwise
/// β = (|𝐀ᵀH𝐁| + |𝐁ᵀH𝐁|) / η_min
/// ```
///
/// and the certificate passes when `α + β < 1`. Failing asserts nothing.
pub fn stability_certificate(aug: &AugmentedSystem, c_lyap: &Matrix, norm: MatrixNorm, opts: &SolverOptions) -> Result<StabilityCertificate> {
    let n = linalg::ensure_square(&aug.current)?;
    if c_lyap.shape() != (n, n) {
        return Err(Error::invalid("c_lyap", format!("must be {n}x{n}, got {}x{}", c_lyap.nrows(), c_lyap.ncols())));
    }
    if linalg::max_abs(&(c_lyap - c_lyap.transpose())) > 1e-12 * (1.0 + linalg::max_abs(c_lyap)) {
        return Err(Error::invalid("c_lyap", "must be symmetric"));
    }
    let (c, _) = linalg::symmetric_eigenvalue_range(c_lyap);
    if c <= 0.0 {
        return Err(Error::invalid("c_lyap", "must be positive definite"));
    }
    let rho = linalg::spectral_radius(&aug.current)?;
    if rho >= 1.0 {
        return Err(linalg::NumericsError::Unstable { spectral_radius: rho }.into());
    }
    let h = linalg::solve_discrete_lyapunov(&aug.current, c_lyap, opts)?;
    let (eta_min, eta_max) = linalg::symmetric_eigenvalue_range(&h);
    let ahb = aug.current.transpose() * &h * &aug.delayed;
    let bhb = aug.delayed.transpose() * &h * &aug.delayed;
    let norm_ahb = norm.apply(&ahb);
    let norm_bhb = norm.apply(&bhb);
    let alpha = if c > norm_ahb {
        (eta_max - c + norm_ahb).abs() / eta_max
    } else {
        (eta_min - c + norm_ahb).abs() / eta_min
    };
    let beta = (norm_ahb + norm_bhb) / eta_min;
    Ok(StabilityCertificate {
        h,
        c_lyap: c_lyap.clone(),
        c,
        eta_min,
        eta_max,
        norm_ahb,
        norm_bhb,
        alpha,
        beta,
        norm,
        passes: alpha + beta < 1.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    /// `‖𝐱_t‖∞` for `t = 0..horizon`.
    pub sup_norms: Vec<f64>,
    /// `exp(slope)` of a least-squares line through `ln ‖𝐱_t‖∞` over the
    /// tail half; 0 when the tail is identically zero.
    pub rate: f64,
}

/// Noise-free rollout of `𝐱_{t+1} = 𝐀𝐱_t + 𝐁𝐱_{t−τ_t}` with zero history
/// before `t = 0`; `delays[t]` is `τ_t`.
pub fn mean_dynamics_rollout(aug: &AugmentedSystem, delays: &[usize], x0: &Vector) -> Result<DecayReport> {
    let n = linalg::ensure_square(&aug.current)?;
    if x0.len() != n {
        return Err(Error::invalid("x0", format!("must have length {n}")));
    }
    if delays.iter().any(|&d| d == 0) {
        return Err(Error::invalid("delays", "delays start at 1"));
    }
    let mut states: Vec<Vector> = Vec::with_capacity(delays.len() + 1);
    states.push(x0.clone());
    for (t, &tau) in delays.iter().enumerate() {
        let mut next = &aug.current * &states[t];
        if tau <= t {
            next.gemv(1.0, &aug.delayed, &states[t - tau], 1.0);
        }
        states.push(next);
    }
    let sup_norms: Vec<f64> = states.iter().map(|x| x.amax()).collect();
    let rate = fitted_rate(&sup_norms);
    Ok(DecayReport { sup_norms, rate })
}

fn fitted_rate(norms: &[f64]) -> f64 {
    let start = norms.len() / 2;
    let points: Vec<(f64, f64)> = norms[start..]
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 1e-290)
        .map(|(i, v)| ((start + i) as f64, v.ln()))
        .collect();
    if points.len() < 2 {
        return 0.0;
    }
    let m = points.len() as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    (sxy / sxx).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralCheckOptions {
    /// Largest uplifted dimension for which `𝔸` is built as a dense
    /// Kronecker sum.
    pub explicit_dim: usize,
    /// Largest uplifted dimension handled at all.
    pub max_dim: usize,
    pub samples: usize,
    pub product_length: usize,
    pub seed: u64,
    pub power_iterations: usize,
    pub power_tolerance: f64,
}

impl Default for SpectralCheckOptions {
    fn default() -> Self {
        Self {
            explicit_dim: 20,
            max_dim: 400,
            samples: 50,
            product_length: 500,
            seed: 0,
            power_iterations: 200_000,
            power_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftedSpectrum {
    /// `ρ(𝒜̄)`
    pub rho_mean: f64,
    /// `ρ(𝔸)`, `𝔸 = E[𝒜⊗𝒜]`
    pub rho_second_moment: f64,
    /// Whether `𝔸` was materialized (otherwise power iteration).
    pub explicit: bool,
    /// Every sampled transition product fell below `1e-6` in spectral norm.
    pub transition_decay: bool,
}

/// Dense `𝔸 = Σ p_τ p′_τ′ 𝒜_{τ,τ′} ⊗ 𝒜_{τ,τ′}`.
pub fn second_moment_operator(up: &UpliftedSystem) -> Matrix {
    let d = up.dim();
    let mut out = Matrix::zeros(d * d, d * d);
    for (tau, tau_a, w) in up.delay_pairs() {
        let a = up.transition(tau, tau_a);
        out += linalg::kron(&a, &a) * w;
    }
    out
}

pub fn uplifted_spectral_check(up: &UpliftedSystem, opts: &SpectralCheckOptions) -> Result<UpliftedSpectrum> {
    let d = up.dim();
    if d > opts.max_dim {
        return Err(Error::ResourceCap { dim: d, cap: opts.max_dim });
    }
    let rho_mean = linalg::spectral_radius(&up.expected_transition())?;
    let explicit = d <= opts.explicit_dim;
    let rho_second_moment = if explicit {
        linalg::spectral_radius(&second_moment_operator(up))?
    } else {
        let start = linalg::vec(&Matrix::identity(d, d));
        linalg::power_iteration_radius(
            |v| linalg::vec(&expected_congruence(up, &linalg::unvec(v, d, d).expect("square"))),
            &start,
            opts.power_iterations,
            opts.power_tolerance,
        )
    };
    Ok(UpliftedSpectrum {
        rho_mean,
        rho_second_moment,
        explicit,
        transition_decay: transition_products_decay(up, opts),
    })
}

fn transition_products_decay(up: &UpliftedSystem, opts: &SpectralCheckOptions) -> bool {
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let real = up.real_delays.sampler();
    let attack = up.attack_delays.sampler();
    let d = up.dim();
    (0..opts.samples).all(|_| {
        let mut product = Matrix::identity(d, d);
        for _ in 0..opts.product_length {
            let tau = real.sample(&mut rng);
            let tau_a = attack.sample(&mut rng);
            product = up.apply_transition(tau, tau_a, &product);
            if !linalg::is_finite(&product) {
                return false;
            }
        }
        linalg::spectral_norm(&product) < 1e-6
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{assemble_uplifted, DelayDistribution, DriveResponseSystem};
    use approx::assert_relative_eq;

    fn s(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn aug(a: Matrix, b: Matrix) -> AugmentedSystem {
        let n = a.nrows();
        AugmentedSystem {
            current: a,
            delayed: b,
            noise: Matrix::zeros(n, 1),
        }
    }

    #[test]
    fn scalar_certificate() {
        let cert = stability_certificate(&aug(s(0.5), s(0.0)), &s(1.0), MatrixNorm::Spectral, &SolverOptions::default()).unwrap();
        assert_relative_eq!(cert.h[(0, 0)], 4.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(cert.alpha, 0.25, epsilon = 1e-12);
        assert_eq!(cert.beta, 0.0);
        assert!(cert.passes);
    }

    #[test]
    fn beta_shrinks_with_the_delay_gain() {
        let mut last = f64::INFINITY;
        for k in [0.2, 0.1, 0.05, 0.01, 0.0] {
            let cert = stability_certificate(&aug(s(0.5), s(k)), &s(1.0), MatrixNorm::Spectral, &SolverOptions::default()).unwrap();
            assert!(cert.beta < last || (k == 0.0 && cert.beta == 0.0));
            last = cert.beta;
        }
    }

    #[test]
    fn certificate_refuses_unstable_loops() {
        assert!(stability_certificate(&aug(s(1.2), s(0.0)), &s(1.0), MatrixNorm::Spectral, &SolverOptions::default()).is_err());
        assert!(stability_certificate(&aug(s(0.5), s(0.0)), &s(-1.0), MatrixNorm::Spectral, &SolverOptions::default()).is_err());
    }

    #[test]
    fn rollout_from_zero_stays_zero() {
        let r = mean_dynamics_rollout(&aug(s(0.5), s(0.3)), &[1, 2, 1, 3], &Vector::zeros(1)).unwrap();
        assert!(r.sup_norms.iter().all(|v| *v == 0.0));
        assert_eq!(r.rate, 0.0);
    }

    #[test]
    fn undelayed_rollout_decays_at_the_spectral_radius() {
        let a = Matrix::from_row_slice(2, 2, &[0.8, 0.3, 0.0, 0.6]);
        let r = mean_dynamics_rollout(&aug(a, Matrix::zeros(2, 2)), &vec![1; 300], &Vector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_relative_eq!(r.rate, 0.8, epsilon = 1e-2);
    }

    fn scalar_uplift(a: f64, b: f64, max_delay: usize) -> UpliftedSystem {
        let zero = Matrix::zeros(1, 1);
        let drs = DriveResponseSystem {
            current: s(a),
            real_delayed: s(b),
            attack_delayed: zero.clone(),
            noise: Matrix::zeros(1, 5),
            n_x: 1,
            n_w: 1,
            n_y: 1,
        };
        let p = DelayDistribution::uniform(1, max_delay).unwrap();
        assemble_uplifted(&drs, &p, &p).unwrap()
    }

    #[test]
    fn scalar_unstable_uplift() {
        let up = scalar_uplift(1.1, 0.0, 1);
        let spec = uplifted_spectral_check(&up, &SpectralCheckOptions::default()).unwrap();
        assert_relative_eq!(spec.rho_second_moment, 1.21, epsilon = 1e-12);
        assert!(!spec.transition_decay);
    }

    #[test]
    fn explicit_and_power_iteration_agree() {
        let up = scalar_uplift(0.6, 0.25, 2);
        let explicit = uplifted_spectral_check(&up, &SpectralCheckOptions::default()).unwrap();
        let implicit = uplifted_spectral_check(
            &up,
            &SpectralCheckOptions {
                explicit_dim: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(explicit.explicit && !implicit.explicit);
        assert_relative_eq!(explicit.rho_second_moment, implicit.rho_second_moment, epsilon = 1e-6);
        assert!(explicit.transition_decay);
        assert!(explicit.rho_mean < 1.0);
    }

    #[test]
    fn resource_cap_is_enforced() {
        let up = scalar_uplift(0.5, 0.1, 5);
        let err = uplifted_spectral_check(
            &up,
            &SpectralCheckOptions {
                max_dim: 3,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::ResourceCap { dim: 6, cap: 3 }));
    }
}
