//! The windowed chi-squared detector and LQG cost accounting.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SolverOptions, Vector};
use crate::sim::{StepRecord, Trace};
use crate::synthesis::{LoopDesign, LqgGains, LtiPlant, Watermark};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Window parameter `T`; a window sums `T + 1` residuals.
    pub window: usize,
    /// Alarm threshold `ψ`.
    pub threshold: f64,
    /// Steps between successive window starts.
    pub stride: usize,
}

impl DetectorConfig {
    pub fn new(window: usize, threshold: f64) -> Result<Self> {
        let cfg = Self {
            window,
            threshold,
            stride: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::invalid("detector.window", "must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::invalid("detector.psi", "must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("detector.stride", "must be at least 1"));
        }
        Ok(())
    }

    pub fn window_terms(&self) -> usize {
        self.window + 1
    }

    /// Degrees of freedom of a clean window: `(T + 1) n_y`.
    pub fn degrees_of_freedom(&self, n_y: usize) -> usize {
        self.window_terms() * n_y
    }
}

/// `ψ` such that a clean window alarms with probability `false_alarm_rate`,
/// from the chi-squared law with `(T + 1) n_y` degrees of freedom.
pub fn calibrate_threshold(window: usize, n_y: usize, false_alarm_rate: f64) -> Result<f64> {
    if !(false_alarm_rate > 0.0 && false_alarm_rate < 1.0) {
        return Err(Error::invalid("detector.false_alarm_rate", "must lie in (0, 1)"));
    }
    if window == 0 || n_y == 0 {
        return Err(Error::invalid("detector.window", "window and output dimension must be positive"));
    }
    let dof = ((window + 1) * n_y) as f64;
    let law = ChiSquared::new(dof).map_err(|e| Error::invalid("detector", e.to_string()))?;
    let target = 1.0 - false_alarm_rate;
    // the library inverse is a coarse bisection; polish with Newton steps
    let mut x = law.inverse_cdf(target);
    for _ in 0..4 {
        let density = law.ln_pdf(x).exp();
        if !(density > 0.0) {
            break;
        }
        x = (x - (law.cdf(x) - target) / density).max(0.0);
    }
    Ok(x)
}

/// Tail probability `P(χ²_dof > psi)`.
pub fn chi2_tail(dof: usize, psi: f64) -> Result<f64> {
    let law = ChiSquared::new(dof as f64).map_err(|e| Error::invalid("detector", e.to_string()))?;
    Ok(1.0 - law.cdf(psi))
}

/// Whitened squared innovation `(y_obs − Cx̂)ᵀ Σ_R⁻¹ (y_obs − Cx̂)`.
#[derive(Debug, Clone)]
pub struct ResidualWhitener {
    c: Matrix,
    sigma_r_inv: Matrix,
    residual: Vector,
    scratch: Vector,
}

impl ResidualWhitener {
    pub fn new(plant: &LtiPlant, sigma_r: &Matrix) -> Result<Self> {
        let n_y = plant.n_y();
        if sigma_r.shape() != (n_y, n_y) {
            return Err(Error::invalid("sigma_r", format!("must be {n_y}x{n_y}")));
        }
        Ok(Self {
            c: plant.c.clone(),
            sigma_r_inv: linalg::spd_inverse(sigma_r, "residual covariance")?,
            residual: Vector::zeros(n_y),
            scratch: Vector::zeros(n_y),
        })
    }

    pub fn for_design(design: &LoopDesign) -> Result<Self> {
        Self::new(&design.plant, &design.kalman.sigma_r)
    }

    pub fn residual(&mut self, rec: &StepRecord) -> &Vector {
        self.residual.copy_from(&rec.y_obs);
        self.residual.gemv(-1.0, &self.c, &rec.xhat, 1.0);
        &self.residual
    }

    pub fn quadratic(&mut self, rec: &StepRecord) -> f64 {
        self.residual(rec);
        self.scratch.gemv(1.0, &self.sigma_r_inv, &self.residual, 0.0);
        self.residual.dot(&self.scratch)
    }
}

/// Streaming `g_κ(T) = Σ_{t=κ}^{κ+T} q_t`. Each push of `q_t` completes the
/// window starting at `κ = t − T` once enough terms exist. Sums are taken
/// afresh over the window so results do not depend on run length.
#[derive(Debug, Clone)]
pub struct WindowedChi2 {
    terms: Vec<f64>,
    head: usize,
    seen: usize,
}

impl WindowedChi2 {
    pub fn new(window: usize) -> Self {
        Self {
            terms: vec![0.0; window + 1],
            head: 0,
            seen: 0,
        }
    }

    /// Returns `(κ, g_κ)` when a window completes.
    pub fn push(&mut self, q: f64) -> Option<(usize, f64)> {
        let len = self.terms.len();
        self.terms[self.head] = q;
        self.head = (self.head + 1) % len;
        self.seen += 1;
        (self.seen >= len).then(|| {
            let mut g = 0.0;
            for k in 0..len {
                g += self.terms[(self.head + k) % len];
            }
            (self.seen - len, g)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    /// Mean of `g` over windows that end before the attack.
    pub mean_pre_attack: Option<f64>,
    /// Mean of `g` over windows that start at or after the attack.
    pub mean_post_attack: Option<f64>,
    pub first_alarm: Option<usize>,
    pub first_alarm_after_attack: Option<usize>,
    pub attack_start: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub config: DetectorConfig,
    pub kappa: Vec<usize>,
    pub g: Vec<f64>,
    pub alarms: Vec<bool>,
    pub summary: DetectorSummary,
}

impl DetectorReport {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "kappa,g,alarm")?;
        for ((k, g), a) in self.kappa.iter().zip(&self.g).zip(&self.alarms) {
            writeln!(out, "{k},{},{}", crate::sim::format_float(*g), u8::from(*a))?;
        }
        Ok(())
    }
}

/// Detector series over a trace. The attack start is the first record with
/// the attack flag set.
pub fn chi2_series(trace: &Trace, design: &LoopDesign, cfg: &DetectorConfig) -> Result<DetectorReport> {
    cfg.validate()?;
    if trace.len() < cfg.window_terms() {
        return Err(Error::invalid("trace", format!("needs at least {} steps", cfg.window_terms())));
    }
    let mut whitener = ResidualWhitener::for_design(design)?;
    let mut windows = WindowedChi2::new(cfg.window);
    let (mut kappa, mut g) = (Vec::new(), Vec::new());
    for rec in &trace.records {
        if let Some((k, v)) = windows.push(whitener.quadratic(rec)) {
            if k % cfg.stride == 0 {
                kappa.push(k);
                g.push(v);
            }
        }
    }
    let attack_start = trace.records.iter().find(|r| r.attack_active).map(|r| r.t);
    Ok(report(kappa, g, *cfg, attack_start))
}

pub(crate) fn report(kappa: Vec<usize>, g: Vec<f64>, config: DetectorConfig, attack_start: Option<usize>) -> DetectorReport {
    let alarms: Vec<bool> = g.iter().map(|v| *v > config.threshold).collect();
    let mean = |sel: &dyn Fn(usize) -> bool| {
        let vals: Vec<f64> = kappa.iter().zip(&g).filter(|(k, _)| sel(**k)).map(|(_, v)| *v).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let t = config.window;
    let (mean_pre_attack, mean_post_attack) = match attack_start {
        Some(s) => (mean(&|k| k + t < s), mean(&|k| k >= s)),
        None => (mean(&|_| true), None),
    };
    let first = |from: usize| kappa.iter().zip(&alarms).find(|(k, a)| **a && **k >= from).map(|(k, _)| *k);
    let summary = DetectorSummary {
        mean_pre_attack,
        mean_post_attack,
        first_alarm: first(0),
        first_alarm_after_attack: attack_start.and_then(first),
        attack_start,
    };
    DetectorReport {
        config,
        kappa,
        g,
        alarms,
        summary,
    }
}

/// Fraction of runs alarming at each window start. All series must share
/// the same window starts.
pub fn detection_rate_curve(series: &[Vec<f64>], threshold: f64) -> Result<Vec<f64>> {
    let Some(first) = series.first() else {
        return Err(Error::invalid("ensemble", "must be nonempty"));
    };
    if series.iter().any(|s| s.len() != first.len()) {
        return Err(Error::invalid("ensemble", "series lengths differ"));
    }
    let n = series.len() as f64;
    Ok((0..first.len())
        .map(|k| series.iter().filter(|s| s[k] > threshold).count() as f64 / n)
        .collect())
}

/// First index at which `curve` reaches `level`, searching from `from`.
pub fn first_crossing(curve: &[f64], level: f64, from: usize) -> Option<usize> {
    curve.iter().enumerate().skip(from).find(|(_, v)| **v >= level).map(|(i, _)| i)
}

/// Discarded prefix for stationary statistics: `max(10 τ̄, 1000)`.
pub fn default_burn_in(max_delay: usize) -> usize {
    (10 * max_delay).max(1000)
}

/// Running time average of `xᵀQx + uᵀRu` after a burn-in.
#[derive(Debug, Clone)]
pub struct CostAccumulator {
    q: Matrix,
    r: Matrix,
    burn_in: usize,
    sum: f64,
    count: usize,
    qx: Vector,
    ru: Vector,
}

impl CostAccumulator {
    pub fn new(q: &Matrix, r: &Matrix, burn_in: usize) -> Self {
        Self {
            q: q.clone(),
            r: r.clone(),
            burn_in,
            sum: 0.0,
            count: 0,
            qx: Vector::zeros(q.nrows()),
            ru: Vector::zeros(r.nrows()),
        }
    }

    pub fn for_design(design: &LoopDesign, burn_in: usize) -> Self {
        Self::new(&design.cost.q, &design.cost.r, burn_in)
    }

    pub fn push(&mut self, rec: &StepRecord) {
        if rec.t < self.burn_in {
            return;
        }
        self.qx.gemv(1.0, &self.q, &rec.x, 0.0);
        self.ru.gemv(1.0, &self.r, &rec.u, 0.0);
        self.sum += rec.x.dot(&self.qx) + rec.u.dot(&self.ru);
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

pub fn empirical_cost(trace: &Trace, q: &Matrix, r: &Matrix, burn_in: usize) -> Result<f64> {
    let mut acc = CostAccumulator::new(q, r, burn_in);
    trace.records.iter().for_each(|rec| acc.push(rec));
    acc.mean()
        .ok_or_else(|| Error::invalid("trace", format!("must be longer than the burn-in of {burn_in} steps")))
}

/// `trace(K_τᵀ (BᵀΔB + R) K_τ)`.
pub fn analytic_cost_penalty(lqg: &LqgGains, plant: &LtiPlant, k_tau: &Matrix) -> Result<f64> {
    if k_tau.shape() != (plant.n_u(), plant.n_x()) {
        return Err(Error::invalid("watermark.k_tau", format!("must be {}x{}", plant.n_u(), plant.n_x())));
    }
    let weight = plant.b.transpose() * &lqg.delta * &plant.b + &lqg.r;
    Ok((k_tau.transpose() * weight * k_tau).trace())
}

/// `trace((BᵀΔB + R) Σ_GW)`: the cost of adding white input noise to the
/// optimal loop.
pub fn gaussian_cost_penalty(lqg: &LqgGains, plant: &LtiPlant, sigma_gw: &Matrix) -> Result<f64> {
    if sigma_gw.shape() != (plant.n_u(), plant.n_u()) {
        return Err(Error::invalid("watermark.sigma_gw", format!("must be {}x{}", plant.n_u(), plant.n_u())));
    }
    let weight = plant.b.transpose() * &lqg.delta * &plant.b + &lqg.r;
    Ok((weight * sigma_gw).trace())
}

/// Stationary cost `J*` of the loop without watermark, from the Lyapunov
/// equation of the augmented state `(x, x̂)`.
pub fn optimal_cost(design: &LoopDesign, opts: &SolverOptions) -> Result<f64> {
    let clean = design.with_watermark(Watermark::None)?;
    let aug = clean.augmented();
    let p = &clean.plant;
    let (n, n_w, n_y) = (p.n_x(), p.n_w(), p.n_y());
    let mut noise_cov = Matrix::zeros(n_w + 2 * n_y, n_w + 2 * n_y);
    noise_cov.view_mut((0, 0), (n_w, n_w)).copy_from(&clean.noise.sigma_w);
    noise_cov.view_mut((n_w, n_w), (n_y, n_y)).copy_from(&clean.noise.sigma_v);
    let source = &aug.noise * noise_cov * aug.noise.transpose();
    let sigma = linalg::solve_discrete_lyapunov(&aug.current.transpose(), &source, opts)?;
    // u = −K(MC x + (I − MC) x̂) − K M v
    let m = &clean.kalman.m;
    let k = &clean.lqg.k;
    let mut map = Matrix::zeros(p.n_u(), 2 * n);
    map.columns_mut(0, n).copy_from(&(-(k * m * &p.c)));
    map.columns_mut(n, n).copy_from(&(-(k * (Matrix::identity(n, n) - m * &p.c))));
    let km = k * m;
    let state_cost = (&clean.cost.q * sigma.view((0, 0), (n, n))).trace();
    let input_cost = (&clean.cost.r * (&map * &sigma * map.transpose() + &km * &clean.noise.sigma_v * km.transpose())).trace();
    Ok(state_cost + input_cost)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub watermark: String,
    pub empirical: f64,
    pub optimal: f64,
    pub penalty: f64,
    /// `J* + penalty`.
    pub predicted: f64,
}

/// Analytic penalty of the design's watermark.
pub fn watermark_penalty(design: &LoopDesign) -> Result<f64> {
    match &design.watermark {
        Watermark::None => Ok(0.0),
        Watermark::DelayFeedback { gain, .. } => analytic_cost_penalty(&design.lqg, &design.plant, gain),
        Watermark::GaussianAdditive { covariance } => gaussian_cost_penalty(&design.lqg, &design.plant, covariance),
    }
}

pub fn cost_report(design: &LoopDesign, empirical: f64, opts: &SolverOptions) -> Result<CostReport> {
    let optimal = optimal_cost(design, opts)?;
    let penalty = watermark_penalty(design)?;
    Ok(CostReport {
        watermark: design.watermark.label().to_string(),
        empirical,
        optimal,
        penalty,
        predicted: optimal + penalty,
    })
}
