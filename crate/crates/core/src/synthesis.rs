//! Plant and noise description, Kalman/LQG gain synthesis, watermark
//! configuration, and the closed-loop state matrices used by simulation and
//! analysis.
//!
//! Block layouts (with `K = K_x̃`, `K_τ` the delay-feedback gain and
//! `E = I − MC`):
//!
//! Augmented loop, state `(x, x̂)` and noise `(w, v_t, v_{t−τ})`:
//!
//! ```text
//! 𝐀 = [ A − BKMC        −BKE            ]   𝐁 = [ −BK_τMC  −BK_τE ]
//!     [ LC − BKMC       A − LC − BKE    ]       [ −BK_τMC  −BK_τE ]
//!
//! 𝚪 = [ D   −BKM       −BK_τM ]
//!     [ 0   L − BKM    −BK_τM ]
//! ```
//!
//! Drive-response, state `(x, x̂, x′, x̂′)` and noise
//! `(w, w′, v′_t, v′_{t−τ}, v′_{t−τ′})`. The real estimator innovates on the
//! replayed `y′ = Cx′ + v′`, so every `Cx` and `v` of the real loop is
//! replaced by `Cx′` and `v′`; the virtual loop is a closed copy driven by
//! its own delays `τ′`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SolverOptions};

/// Discrete LTI plant `x⁺ = Ax + Bu + Dw`, `y = Cx + v`.
///
/// `D` is not given a value by the watermarking model; it defaults to the
/// identity (so `n_w = n_x`) and can be overridden with
/// [`LtiPlant::with_noise_input`].
#[derive(Debug, Clone, PartialEq)]
pub struct LtiPlant {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
}

impl LtiPlant {
    pub fn new(a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let n = a.nrows();
        Self::with_noise_input(a, b, c, Matrix::identity(n, n))
    }

    pub fn with_noise_input(a: Matrix, b: Matrix, c: Matrix, d: Matrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || n == 0 {
            return Err(Error::invalid("plant.a", format!("must be square and nonempty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::invalid("plant.b", format!("expected {n} rows, got {}x{}", b.nrows(), b.ncols())));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::invalid("plant.c", format!("expected {n} columns, got {}x{}", c.nrows(), c.ncols())));
        }
        if d.nrows() != n || d.ncols() == 0 {
            return Err(Error::invalid("plant.d", format!("expected {n} rows, got {}x{}", d.nrows(), d.ncols())));
        }
        for (name, m) in [("plant.a", &a), ("plant.b", &b), ("plant.c", &c), ("plant.d", &d)] {
            if !linalg::is_finite(m) {
                return Err(Error::invalid(name, "contains non-finite entries"));
            }
        }
        Ok(Self { a, b, c, d })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }
    pub fn n_w(&self) -> usize {
        self.d.ncols()
    }
}

fn check_symmetric(field: &str, m: &Matrix) -> Result<()> {
    let scale = linalg::max_abs(m).max(1.0);
    if linalg::max_abs(&(m - m.transpose())) > 1e-12 * scale {
        return Err(Error::invalid(field, "must be symmetric"));
    }
    Ok(())
}

fn check_psd(field: &str, m: &Matrix, strict: bool) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid(field, format!("must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    if !linalg::is_finite(m) {
        return Err(Error::invalid(field, "contains non-finite entries"));
    }
    check_symmetric(field, m)?;
    if m.nrows() == 0 {
        return Ok(());
    }
    let (min, max) = linalg::symmetric_eigenvalue_range(m);
    let floor = -1e-12 * max.abs().max(1.0);
    if strict && min <= 0.0 {
        return Err(Error::invalid(field, format!("must be positive definite (smallest eigenvalue {min:.3e})")));
    }
    if min < floor {
        return Err(Error::invalid(field, format!("must be positive semidefinite (smallest eigenvalue {min:.3e})")));
    }
    Ok(())
}

/// Gaussian process and measurement noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub sigma_w: Matrix,
    pub sigma_v: Matrix,
}

impl NoiseModel {
    pub fn new(sigma_w: Matrix, sigma_v: Matrix) -> Result<Self> {
        check_psd("noise.sigma_w", &sigma_w, false)?;
        check_psd("noise.sigma_v", &sigma_v, true)?;
        Ok(Self { sigma_w, sigma_v })
    }

    fn check_against(&self, plant: &LtiPlant) -> Result<()> {
        if self.sigma_w.nrows() != plant.n_w() {
            return Err(Error::invalid("noise.sigma_w", format!("expected {0}x{0} to match plant.d", plant.n_w())));
        }
        if self.sigma_v.nrows() != plant.n_y() {
            return Err(Error::invalid("noise.sigma_v", format!("expected {0}x{0} to match plant.c", plant.n_y())));
        }
        Ok(())
    }

    /// `D Σ_W Dᵀ`, the process noise covariance in state coordinates.
    pub fn effective_process(&self, plant: &LtiPlant) -> Matrix {
        &plant.d * &self.sigma_w * plant.d.transpose()
    }
}

/// State and input weights of the quadratic cost.
#[derive(Debug, Clone, PartialEq)]
pub struct LqgCost {
    pub q: Matrix,
    pub r: Matrix,
}

impl LqgCost {
    pub fn new(q: Matrix, r: Matrix) -> Result<Self> {
        check_psd("cost.q", &q, false)?;
        check_psd("cost.r", &r, true)?;
        Ok(Self { q, r })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanGains {
    /// Stationary prediction error covariance.
    pub p: Matrix,
    /// Predictor gain `L = AM`.
    pub l: Matrix,
    /// Innovation gain `M = PCᵀ(CPCᵀ+Σ_V)⁻¹`.
    pub m: Matrix,
    /// Innovation covariance `Σ_R = CPCᵀ + Σ_V`.
    pub sigma_r: Matrix,
}

impl KalmanGains {
    pub fn from_covariance(plant: &LtiPlant, noise: &NoiseModel, p: Matrix) -> Result<Self> {
        let c = &plant.c;
        let sigma_r = linalg::symmetrize(&(c * &p * c.transpose() + &noise.sigma_v));
        let m = linalg::spd_solve(&sigma_r, &(c * &p), "innovation covariance")?.transpose();
        let l = &plant.a * &m;
        Ok(Self { p, l, m, sigma_r })
    }

    /// Largest violation of the gain identities and of the filter DARE.
    pub fn invariant_error(&self, plant: &LtiPlant, noise: &NoiseModel) -> Result<f64> {
        let c = &plant.c;
        let sigma_r = c * &self.p * c.transpose() + &noise.sigma_v;
        let e_sigma = linalg::max_abs(&(&sigma_r - &self.sigma_r));
        let e_m = linalg::max_abs(&(&self.m * &sigma_r - &self.p * c.transpose()));
        let e_l = linalg::max_abs(&(&self.l - &plant.a * &self.m));
        let e_dare = linalg::filter_dare_residual(&plant.a, c, &noise.effective_process(plant), &noise.sigma_v, &self.p)?;
        Ok(e_sigma.max(e_m).max(e_l).max(e_dare))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqgGains {
    /// Control Riccati solution `Δ`.
    pub delta: Matrix,
    /// Feedback gain `K_x̃ = (R + BᵀΔB)⁻¹BᵀΔA`.
    pub k: Matrix,
    pub q: Matrix,
    pub r: Matrix,
}

impl LqgGains {
    pub fn from_value(plant: &LtiPlant, cost: &LqgCost, delta: Matrix) -> Result<Self> {
        let b = &plant.b;
        let s = &cost.r + b.transpose() * &delta * b;
        let k = linalg::spd_solve(&s, &(b.transpose() * &delta * &plant.a), "LQ input weight")?;
        Ok(Self {
            delta,
            k,
            q: cost.q.clone(),
            r: cost.r.clone(),
        })
    }

    pub fn invariant_error(&self, plant: &LtiPlant) -> Result<f64> {
        let b = &plant.b;
        let s = &self.r + b.transpose() * &self.delta * b;
        let e_k = linalg::max_abs(&(&s * &self.k - b.transpose() * &self.delta * &plant.a));
        let e_dare = linalg::control_dare_residual(&plant.a, b, &self.q, &self.r, &self.delta)?;
        Ok(e_k.max(e_dare))
    }
}

/// Solves both Riccati equations and forms the Kalman and LQG gains.
pub fn synthesize(plant: &LtiPlant, noise: &NoiseModel, cost: &LqgCost, opts: &SolverOptions) -> Result<(KalmanGains, LqgGains)> {
    noise.check_against(plant)?;
    if cost.q.nrows() != plant.n_x() {
        return Err(Error::invalid("cost.q", format!("expected {0}x{0}", plant.n_x())));
    }
    if cost.r.nrows() != plant.n_u() {
        return Err(Error::invalid("cost.r", format!("expected {0}x{0}", plant.n_u())));
    }
    let p = linalg::solve_filter_dare(&plant.a, &plant.c, &noise.effective_process(plant), &noise.sigma_v, opts)
        .map_err(|source| Error::Synthesis { equation: "filter Riccati equation", source })?;
    let delta = linalg::solve_control_dare(&plant.a, &plant.b, &cost.q, &cost.r, opts)
        .map_err(|source| Error::Synthesis { equation: "control Riccati equation", source })?;
    Ok((KalmanGains::from_covariance(plant, noise, p)?, LqgGains::from_value(plant, cost, delta)?))
}

/// Probability mass function of the feedback delay on `{1, …, τ̄}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayDistribution {
    /// `pmf[k − 1] = P(τ = k)`.
    pmf: Vec<f64>,
}

impl DelayDistribution {
    pub fn new(pmf: Vec<f64>) -> Result<Self> {
        if pmf.is_empty() {
            return Err(Error::invalid("watermark.pmf", "maximum delay must be at least 1"));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("watermark.pmf", "probabilities must be finite and nonnegative"));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("watermark.pmf", format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self { pmf })
    }

    /// Uniform over the integers `lo..=hi`.
    pub fn uniform(lo: usize, hi: usize) -> Result<Self> {
        if lo == 0 || lo > hi {
            return Err(Error::invalid("watermark.tau_min", format!("need 1 <= tau_min <= tau_max, got {lo}..{hi}")));
        }
        let weight = 1.0 / (hi - lo + 1) as f64;
        let pmf = (1..=hi).map(|k| if k >= lo { weight } else { 0.0 }).collect();
        Self::new(pmf)
    }

    pub fn point(tau: usize) -> Result<Self> {
        Self::uniform(tau, tau)
    }

    pub fn max_delay(&self) -> usize {
        self.pmf.len()
    }

    /// `P(τ = k)`, zero outside `{1, …, τ̄}`.
    pub fn prob(&self, k: isize) -> f64 {
        if k < 1 {
            return 0.0;
        }
        self.pmf.get(k as usize - 1).copied().unwrap_or(0.0)
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// `(τ, p_τ)` for every delay with positive probability.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pmf
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| (i + 1, *p))
    }

    /// Same distribution on a longer support, padded with zeros.
    pub fn padded(&self, max_delay: usize) -> Self {
        let mut pmf = self.pmf.clone();
        if max_delay > pmf.len() {
            pmf.resize(max_delay, 0.0);
        }
        Self { pmf }
    }

    /// `Σ_k p_k q_k`, the chance that independent draws from the two
    /// distributions coincide.
    pub fn coincidence(&self, other: &DelayDistribution) -> f64 {
        self.pmf.iter().zip(&other.pmf).map(|(p, q)| p * q).sum()
    }

    pub fn mean(&self) -> f64 {
        self.support().map(|(k, p)| k as f64 * p).sum()
    }

    pub fn sampler(&self) -> DelaySampler {
        let mut acc = 0.0;
        let cdf = self
            .pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let last = self.support().last().map(|(k, _)| k).unwrap_or(1);
        DelaySampler { cdf, last }
    }
}

/// Inverse-CDF sampler for a [`DelayDistribution`]; consumes exactly one
/// uniform draw per sample.
#[derive(Debug, Clone)]
pub struct DelaySampler {
    cdf: Vec<f64>,
    last: usize,
}

impl DelaySampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let idx = self.cdf.partition_point(|c| *c <= u);
        if idx >= self.cdf.len() {
            self.last
        } else {
            idx + 1
        }
    }
}

/// Watermark added to the LQG input.
#[derive(Debug, Clone, PartialEq)]
pub enum Watermark {
    None,
    /// `u_WM = −K_τ x̃_{t−τ_t}` with IID delays.
    DelayFeedback { gain: Matrix, delays: DelayDistribution },
    /// `u_WM ~ N(0, Σ_GW)`, IID.
    GaussianAdditive { covariance: Matrix },
}

impl Watermark {
    pub fn label(&self) -> &'static str {
        match self {
            Watermark::None => "none",
            Watermark::DelayFeedback { .. } => "delay",
            Watermark::GaussianAdditive { .. } => "gaussian",
        }
    }

    pub fn validate(&self, plant: &LtiPlant) -> Result<()> {
        match self {
            Watermark::None => Ok(()),
            Watermark::DelayFeedback { gain, .. } => {
                if gain.shape() != (plant.n_u(), plant.n_x()) {
                    return Err(Error::invalid(
                        "watermark.k_tau",
                        format!("expected {}x{} (inputs x states), got {}x{}", plant.n_u(), plant.n_x(), gain.nrows(), gain.ncols()),
                    ));
                }
                Ok(())
            }
            Watermark::GaussianAdditive { covariance } => {
                if covariance.shape() != (plant.n_u(), plant.n_u()) {
                    return Err(Error::invalid("watermark.sigma_gw", format!("expected {0}x{0}", plant.n_u())));
                }
                check_psd("watermark.sigma_gw", covariance, false)
            }
        }
    }

    /// `K_τ`, or the zero matrix for the other variants.
    pub fn delay_gain(&self, plant: &LtiPlant) -> Matrix {
        match self {
            Watermark::DelayFeedback { gain, .. } => gain.clone(),
            _ => Matrix::zeros(plant.n_u(), plant.n_x()),
        }
    }

    pub fn delays(&self) -> Option<&DelayDistribution> {
        match self {
            Watermark::DelayFeedback { delays, .. } => Some(delays),
            _ => None,
        }
    }
}

/// A fully synthesized watermarked LQG loop.
#[derive(Debug, Clone)]
pub struct LoopDesign {
    pub plant: LtiPlant,
    pub noise: NoiseModel,
    pub cost: LqgCost,
    pub kalman: KalmanGains,
    pub lqg: LqgGains,
    pub watermark: Watermark,
}

impl LoopDesign {
    pub fn new(plant: LtiPlant, noise: NoiseModel, cost: LqgCost, watermark: Watermark, opts: &SolverOptions) -> Result<Self> {
        watermark.validate(&plant)?;
        let (kalman, lqg) = synthesize(&plant, &noise, &cost, opts)?;
        Ok(Self {
            plant,
            noise,
            cost,
            kalman,
            lqg,
            watermark,
        })
    }

    /// Same plant and gains with a different watermark.
    pub fn with_watermark(&self, watermark: Watermark) -> Result<Self> {
        watermark.validate(&self.plant)?;
        Ok(Self {
            watermark,
            ..self.clone()
        })
    }

    pub fn delay_gain(&self) -> Matrix {
        self.watermark.delay_gain(&self.plant)
    }

    pub fn augmented(&self) -> AugmentedSystem {
        assemble_augmented(&self.plant, &self.kalman, &self.lqg, &self.delay_gain()).expect("validated design")
    }

    pub fn drive_response(&self) -> DriveResponseSystem {
        assemble_drive_response(&self.plant, &self.kalman, &self.lqg, &self.delay_gain()).expect("validated design")
    }
}

/// Builds a dense matrix from a grid of equally-tall (per row) and
/// equally-wide (per column) blocks.
pub(crate) fn block_matrix(grid: &[Vec<Matrix>]) -> Matrix {
    let heights: Vec<usize> = grid.iter().map(|row| row[0].nrows()).collect();
    let widths: Vec<usize> = grid[0].iter().map(|b| b.ncols()).collect();
    let mut out = Matrix::zeros(heights.iter().sum(), widths.iter().sum());
    let mut r0 = 0;
    for (row, h) in grid.iter().zip(&heights) {
        let mut c0 = 0;
        for (block, w) in row.iter().zip(&widths) {
            debug_assert_eq!(block.shape(), (*h, *w));
            out.view_mut((r0, c0), (*h, *w)).copy_from(block);
            c0 += w;
        }
        r0 += h;
    }
    out
}

/// `x_{t+1} = 𝐀x_t + 𝐁x_{t−τ_t} + 𝚪n_t` for the stacked state `(x, x̂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSystem {
    pub current: Matrix,
    pub delayed: Matrix,
    pub noise: Matrix,
}

struct LoopBlocks {
    a: Matrix,
    d: Matrix,
    lc: Matrix,
    /// `BK_x̃MC`
    bkmc: Matrix,
    /// `BK_x̃(I − MC)`
    bke: Matrix,
    bkm: Matrix,
    btmc: Matrix,
    bte: Matrix,
    btm: Matrix,
    l: Matrix,
}

fn loop_blocks(plant: &LtiPlant, kalman: &KalmanGains, lqg: &LqgGains, k_tau: &Matrix) -> Result<LoopBlocks> {
    let n = plant.n_x();
    if k_tau.shape() != (plant.n_u(), n) {
        return Err(Error::invalid("k_tau", format!("expected {}x{n}", plant.n_u())));
    }
    if kalman.m.shape() != (n, plant.n_y()) || lqg.k.shape() != (plant.n_u(), n) {
        return Err(Error::invalid("gains", "dimensions do not match the plant"));
    }
    let c = &plant.c;
    let e = Matrix::identity(n, n) - &kalman.m * c;
    let bk = &plant.b * &lqg.k;
    let bt = &plant.b * k_tau;
    Ok(LoopBlocks {
        a: plant.a.clone(),
        d: plant.d.clone(),
        lc: &kalman.l * c,
        bkmc: &bk * &kalman.m * c,
        bke: &bk * &e,
        bkm: &bk * &kalman.m,
        btmc: &bt * &kalman.m * c,
        bte: &bt * &e,
        btm: &bt * &kalman.m,
        l: kalman.l.clone(),
    })
}

pub fn assemble_augmented(plant: &LtiPlant, kalman: &KalmanGains, lqg: &LqgGains, k_tau: &Matrix) -> Result<AugmentedSystem> {
    let k = loop_blocks(plant, kalman, lqg, k_tau)?;
    let (n, nw, ny) = (plant.n_x(), plant.n_w(), plant.n_y());
    let current = block_matrix(&[
        vec![&k.a - &k.bkmc, -&k.bke],
        vec![&k.lc - &k.bkmc, &k.a - &k.lc - &k.bke],
    ]);
    let delayed = block_matrix(&[vec![-&k.btmc, -&k.bte], vec![-&k.btmc, -&k.bte]]);
    let noise = block_matrix(&[
        vec![k.d.clone(), -&k.bkm, -&k.btm],
        vec![Matrix::zeros(n, nw), &k.l - &k.bkm, -&k.btm],
    ]);
    debug_assert_eq!(noise.shape(), (2 * n, nw + 2 * ny));
    Ok(AugmentedSystem { current, delayed, noise })
}

/// `x†_{t+1} = 𝐀‡x†_t + 𝐁‡x†_{t−τ_t} + 𝐂‡x†_{t−τ′_t} + 𝐆‡n†_t` for the
/// stacked state `(x, x̂, x′, x̂′)` under replay.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveResponseSystem {
    pub current: Matrix,
    /// Multiplies the state delayed by the real loop's `τ_t`.
    pub real_delayed: Matrix,
    /// Multiplies the state delayed by the virtual loop's `τ′_t`.
    pub attack_delayed: Matrix,
    pub noise: Matrix,
    pub n_x: usize,
    pub n_w: usize,
    pub n_y: usize,
}

impl DriveResponseSystem {
    pub fn state_dim(&self) -> usize {
        self.current.nrows()
    }

    pub fn noise_dim(&self) -> usize {
        self.noise.ncols()
    }
}

pub fn assemble_drive_response(plant: &LtiPlant, kalman: &KalmanGains, lqg: &LqgGains, k_tau: &Matrix) -> Result<DriveResponseSystem> {
    let k = loop_blocks(plant, kalman, lqg, k_tau)?;
    let (n, nw, ny) = (plant.n_x(), plant.n_w(), plant.n_y());
    let z = || Matrix::zeros(n, n);
    let zw = || Matrix::zeros(n, nw);
    let zy = || Matrix::zeros(n, ny);

    let current = block_matrix(&[
        vec![k.a.clone(), -&k.bke, -&k.bkmc, z()],
        vec![z(), &k.a - &k.lc - &k.bke, &k.lc - &k.bkmc, z()],
        vec![z(), z(), &k.a - &k.bkmc, -&k.bke],
        vec![z(), z(), &k.lc - &k.bkmc, &k.a - &k.lc - &k.bke],
    ]);
    let real_delayed = block_matrix(&[
        vec![z(), -&k.bte, -&k.btmc, z()],
        vec![z(), -&k.bte, -&k.btmc, z()],
        vec![z(), z(), z(), z()],
        vec![z(), z(), z(), z()],
    ]);
    let attack_delayed = block_matrix(&[
        vec![z(), z(), z(), z()],
        vec![z(), z(), z(), z()],
        vec![z(), z(), -&k.btmc, -&k.bte],
        vec![z(), z(), -&k.btmc, -&k.bte],
    ]);
    let noise = block_matrix(&[
        vec![k.d.clone(), zw(), -&k.bkm, -&k.btm, zy()],
        vec![zw(), zw(), &k.l - &k.bkm, -&k.btm, zy()],
        vec![zw(), k.d.clone(), -&k.bkm, zy(), -&k.btm],
        vec![zw(), zw(), &k.l - &k.bkm, zy(), -&k.btm],
    ]);
    Ok(DriveResponseSystem {
        current,
        real_delayed,
        attack_delayed,
        noise,
        n_x: n,
        n_w: nw,
        n_y: ny,
    })
}

/// Delay-free lift `𝕏_{t+1} = 𝒜_{τ_t,τ′_t}𝕏_t + 𝒢ℕ_t` of the drive-response
/// system, with `𝕏_t = (x†_t, x†_{t−1}, …, x†_{t−τ̄})`.
#[derive(Debug, Clone)]
pub struct UpliftedSystem {
    pub drs: DriveResponseSystem,
    pub real_delays: DelayDistribution,
    pub attack_delays: DelayDistribution,
    max_delay: usize,
}

pub fn assemble_uplifted(drs: &DriveResponseSystem, real_delays: &DelayDistribution, attack_delays: &DelayDistribution) -> Result<UpliftedSystem> {
    let max_delay = real_delays.max_delay().max(attack_delays.max_delay());
    if max_delay == 0 {
        return Err(Error::invalid("delays", "maximum delay must be at least 1"));
    }
    Ok(UpliftedSystem {
        drs: drs.clone(),
        real_delays: real_delays.padded(max_delay),
        attack_delays: attack_delays.padded(max_delay),
        max_delay,
    })
}

impl UpliftedSystem {
    pub fn max_delay(&self) -> usize {
        self.max_delay
    }

    /// Size of one slot `x†`.
    pub fn block(&self) -> usize {
        self.drs.state_dim()
    }

    pub fn dim(&self) -> usize {
        self.block() * (self.max_delay + 1)
    }

    pub fn noise_dim(&self) -> usize {
        self.drs.noise_dim()
    }

    /// `(τ, τ′, p_τ p′_τ′)` over all pairs with positive weight, in a fixed
    /// order.
    pub fn delay_pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (tau, p) in self.real_delays.support() {
            for (tau_a, q) in self.attack_delays.support() {
                out.push((tau, tau_a, p * q));
            }
        }
        out
    }

    /// Top block-row of `𝒜_{τ,τ′}`.
    pub fn top_row(&self, tau: usize, tau_attack: usize) -> Matrix {
        let nb = self.block();
        let mut top = Matrix::zeros(nb, self.dim());
        top.view_mut((0, 0), (nb, nb)).copy_from(&self.drs.current);
        let mut add = |slot: usize, m: &Matrix| {
            let mut v = top.view_mut((0, slot * nb), (nb, nb));
            v += m;
        };
        add(tau, &self.drs.real_delayed);
        add(tau_attack, &self.drs.attack_delayed);
        top
    }

    /// `𝒜_{τ,τ′}` as a dense matrix.
    pub fn transition(&self, tau: usize, tau_attack: usize) -> Matrix {
        assert!(tau >= 1 && tau <= self.max_delay && tau_attack >= 1 && tau_attack <= self.max_delay);
        let nb = self.block();
        let dim = self.dim();
        let mut m = Matrix::zeros(dim, dim);
        m.view_mut((0, 0), (nb, dim)).copy_from(&self.top_row(tau, tau_attack));
        for k in 0..self.max_delay {
            m.view_mut(((k + 1) * nb, k * nb), (nb, nb)).fill_with_identity();
        }
        m
    }

    /// `𝒜_{τ,τ′} X` without forming `𝒜`: the top slot is recomputed and the
    /// remaining slots shift down by one.
    pub fn apply_transition(&self, tau: usize, tau_attack: usize, x: &Matrix) -> Matrix {
        let nb = self.block();
        let dim = self.dim();
        assert_eq!(x.nrows(), dim);
        let cols = x.ncols();
        let mut out = Matrix::zeros(dim, cols);
        let top = &self.drs.current * x.rows(0, nb)
            + &self.drs.real_delayed * x.rows(tau * nb, nb)
            + &self.drs.attack_delayed * x.rows(tau_attack * nb, nb);
        out.rows_mut(0, nb).copy_from(&top);
        out.rows_mut(nb, dim - nb).copy_from(&x.rows(0, dim - nb));
        out
    }

    /// `𝒢`: the drive-response noise map in the top slot, zero below.
    pub fn noise_input(&self) -> Matrix {
        let mut g = Matrix::zeros(self.dim(), self.noise_dim());
        g.view_mut((0, 0), (self.block(), self.noise_dim())).copy_from(&self.drs.noise);
        g
    }

    /// `𝒜̄ = Σ p_τ p′_τ′ 𝒜_{τ,τ′}`.
    pub fn expected_transition(&self) -> Matrix {
        let nb = self.block();
        let dim = self.dim();
        let mut m = Matrix::zeros(dim, dim);
        m.view_mut((0, 0), (nb, nb)).copy_from(&self.drs.current);
        for (tau, p) in self.real_delays.support() {
            let mut v = m.view_mut((0, tau * nb), (nb, nb));
            v += &self.drs.real_delayed * p;
        }
        for (tau, p) in self.attack_delays.support() {
            let mut v = m.view_mut((0, tau * nb), (nb, nb));
            v += &self.drs.attack_delayed * p;
        }
        for k in 0..self.max_delay {
            m.view_mut(((k + 1) * nb, k * nb), (nb, nb)).fill_with_identity();
        }
        m
    }
}

/// Convenience for tests and presets: `s · [I_n; 0]` of shape `rows × n`.
pub fn stacked_identity(rows: usize, n: usize, scale: f64) -> Matrix {
    DMatrix::from_fn(rows, n, |i, j| if i == j { scale } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn scalar_design(k_tau: f64) -> LoopDesign {
        let plant = LtiPlant::new(s(0.5), s(1.0), s(1.0)).unwrap();
        let noise = NoiseModel::new(s(1.0), s(1.0)).unwrap();
        let cost = LqgCost::new(s(1.0), s(1.0)).unwrap();
        let wm = Watermark::DelayFeedback {
            gain: s(k_tau),
            delays: DelayDistribution::uniform(1, 2).unwrap(),
        };
        LoopDesign::new(plant, noise, cost, wm, &SolverOptions::default()).unwrap()
    }

    #[test]
    fn scalar_synthesis_closed_forms() {
        let d = scalar_design(0.0);
        let root = (0.25 + (4.0625f64).sqrt()) / 2.0;
        assert_relative_eq!(d.kalman.p[(0, 0)], root, epsilon = 1e-12);
        assert_relative_eq!(d.lqg.delta[(0, 0)], root, epsilon = 1e-12);
        assert_relative_eq!(d.lqg.k[(0, 0)], 0.5 * root / (1.0 + root), epsilon = 1e-12);
        assert_relative_eq!(d.kalman.m[(0, 0)], root / (root + 1.0), epsilon = 1e-12);
        assert_relative_eq!(d.kalman.l[(0, 0)], 0.5 * root / (root + 1.0), epsilon = 1e-12);
    }

    #[test]
    fn zero_actuator_column_keeps_gain_identity() {
        let a = Matrix::from_row_slice(2, 2, &[0.9, 0.2, 0.0, 0.7]);
        let b = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.0]);
        let plant = LtiPlant::new(a, b, Matrix::identity(2, 2)).unwrap();
        let noise = NoiseModel::new(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        let cost = LqgCost::new(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        let (kalman, lqg) = synthesize(&plant, &noise, &cost, &SolverOptions::default()).unwrap();
        assert!(lqg.invariant_error(&plant).unwrap() < 1e-9);
        assert!(kalman.invariant_error(&plant, &noise).unwrap() < 1e-9);
        // the unused actuator gets no feedback
        assert!(lqg.k.row(1).amax() < 1e-12);
    }

    #[test]
    fn delay_distribution_validation() {
        assert!(DelayDistribution::new(vec![]).is_err());
        assert!(DelayDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(DelayDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(DelayDistribution::uniform(0, 3).is_err());
        let d = DelayDistribution::uniform(50, 200).unwrap();
        assert_eq!(d.max_delay(), 200);
        assert_eq!(d.prob(49), 0.0);
        assert_relative_eq!(d.prob(50), 1.0 / 151.0);
        assert_eq!(d.prob(201), 0.0);
        assert_eq!(d.prob(-3), 0.0);
        assert_relative_eq!(d.coincidence(&d), 1.0 / 151.0, epsilon = 1e-15);
    }

    #[test]
    fn delay_sampler_respects_support() {
        let d = DelayDistribution::new(vec![0.0, 0.25, 0.0, 0.75]).unwrap();
        let sampler = d.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 5];
        for _ in 0..40_000 {
            counts[sampler.sample(&mut rng)] += 1;
        }
        assert_eq!(counts[0] + counts[1] + counts[3], 0);
        let frac = counts[2] as f64 / 40_000.0;
        assert!((frac - 0.25).abs() < 0.01, "{frac}");
    }

    #[test]
    fn watermark_off_gives_classical_loop() {
        let d = scalar_design(0.0);
        let aug = d.augmented();
        assert_eq!(aug.delayed, Matrix::zeros(2, 2));
        let (a, b, c) = (0.5, 1.0, 1.0);
        let (k, m, l) = (d.lqg.k[(0, 0)], d.kalman.m[(0, 0)], d.kalman.l[(0, 0)]);
        let expected = Matrix::from_row_slice(2, 2, &[a - b * k * m * c, -b * k * (1.0 - m * c), l * c - b * k * m * c, a - l * c - b * k * (1.0 - m * c)]);
        assert_relative_eq!(aug.current, expected, epsilon = 1e-15);
    }

    #[test]
    fn open_loop_augmented_is_block_diagonal() {
        let plant = LtiPlant::new(Matrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]), Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        let noise = NoiseModel::new(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        let kalman = KalmanGains {
            p: Matrix::zeros(2, 2),
            l: Matrix::zeros(2, 2),
            m: Matrix::from_element(2, 2, 0.3),
            sigma_r: noise.sigma_v.clone(),
        };
        let lqg = LqgGains {
            delta: Matrix::zeros(2, 2),
            k: Matrix::zeros(2, 2),
            q: Matrix::zeros(2, 2),
            r: Matrix::identity(2, 2),
        };
        let aug = assemble_augmented(&plant, &kalman, &lqg, &Matrix::zeros(2, 2)).unwrap();
        let expected = block_matrix(&[vec![plant.a.clone(), Matrix::zeros(2, 2)], vec![Matrix::zeros(2, 2), plant.a.clone()]]);
        assert_eq!(aug.current, expected);
    }

    #[test]
    fn drive_response_folds_onto_augmented_loop() {
        // replacing y′ by y merges the (x′, x̂′) columns into (x, x̂)
        let d = scalar_design(0.2);
        let aug = d.augmented();
        let drs = d.drive_response();
        let cur = &drs.current;
        let folded = cur.view((0, 0), (2, 2)) + cur.view((0, 2), (2, 2));
        assert_relative_eq!(folded.clone_owned(), aug.current, epsilon = 1e-15);
        let folded_b = drs.real_delayed.view((0, 0), (2, 2)) + drs.real_delayed.view((0, 2), (2, 2));
        assert_relative_eq!(folded_b.clone_owned(), aug.delayed, epsilon = 1e-15);
        // the virtual half is a closed copy of the augmented loop
        assert_relative_eq!(cur.view((2, 2), (2, 2)).clone_owned(), aug.current, epsilon = 1e-15);
        assert_relative_eq!(drs.attack_delayed.view((2, 2), (2, 2)).clone_owned(), aug.delayed, epsilon = 1e-15);
        assert_eq!(cur.view((2, 0), (2, 2)).amax(), 0.0);
    }

    #[test]
    fn drive_response_without_watermark_has_no_delay_channel() {
        let d = scalar_design(0.0);
        let drs = d.drive_response();
        assert_eq!(drs.real_delayed.amax(), 0.0);
        assert_eq!(drs.attack_delayed.amax(), 0.0);
    }

    #[test]
    fn uplift_single_delay_is_constant() {
        let d = scalar_design(0.3);
        let up = assemble_uplifted(&d.drive_response(), &DelayDistribution::point(1).unwrap(), &DelayDistribution::point(1).unwrap()).unwrap();
        assert_eq!(up.dim(), 8);
        assert_eq!(up.delay_pairs().len(), 1);
        assert_relative_eq!(up.expected_transition(), up.transition(1, 1), epsilon = 1e-15);
    }

    #[test]
    fn uplift_shift_structure_on_constant_stack() {
        let d = scalar_design(0.3);
        let delays = DelayDistribution::uniform(1, 3).unwrap();
        let up = assemble_uplifted(&d.drive_response(), &delays, &delays).unwrap();
        let drs = &up.drs;
        let sum = &drs.current + &drs.real_delayed + &drs.attack_delayed;
        let v = nalgebra::DVector::from_vec(vec![0.3, -1.2, 0.7, 2.0]);
        let stacked = nalgebra::DVector::from_iterator(up.dim(), (0..4).flat_map(|_| v.iter().cloned()));
        for (tau, tau_a, _) in up.delay_pairs() {
            let out = up.transition(tau, tau_a) * &stacked;
            assert_relative_eq!(out.rows(0, 4).clone_owned(), &sum * &v, epsilon = 1e-14);
            for k in 1..4 {
                assert_eq!(out.rows(4 * k, 4).clone_owned(), v);
            }
        }
    }

    #[test]
    fn structured_apply_matches_dense_transition() {
        let d = scalar_design(0.3);
        let delays = DelayDistribution::uniform(1, 3).unwrap();
        let up = assemble_uplifted(&d.drive_response(), &delays, &delays).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::from_fn(up.dim(), 5, |_, _| rng.gen_range(-1.0..1.0));
        for (tau, tau_a, _) in up.delay_pairs() {
            assert_relative_eq!(up.apply_transition(tau, tau_a, &x), up.transition(tau, tau_a) * &x, epsilon = 1e-14);
        }
        let mean: Matrix = up.delay_pairs().iter().fold(Matrix::zeros(up.dim(), up.dim()), |acc, (t, ta, w)| acc + up.transition(*t, *ta) * *w);
        assert_relative_eq!(mean, up.expected_transition(), epsilon = 1e-14);
    }

    #[test]
    fn invalid_dimensions_are_named() {
        let err = LtiPlant::new(Matrix::identity(2, 2), Matrix::zeros(3, 1), Matrix::identity(2, 2)).unwrap_err();
        assert!(err.to_string().contains("plant.b"));
        let err = NoiseModel::new(Matrix::identity(2, 2), Matrix::zeros(2, 2)).unwrap_err();
        assert!(err.to_string().contains("sigma_v"));
        let plant = LtiPlant::new(Matrix::identity(2, 2) * 0.5, Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        let wm = Watermark::DelayFeedback {
            gain: Matrix::zeros(2, 3),
            delays: DelayDistribution::point(1).unwrap(),
        };
        assert!(wm.validate(&plant).unwrap_err().to_string().contains("k_tau"));
    }

    use rand::Rng;
}
