//! Pipelines behind the `delaymark` commands. Each command resolves an
//! [`ExperimentConfig`], writes its artifacts into an output directory and
//! finishes with `manifest.json` listing them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, WatermarkVariant};
use crate::covariance::{
    asymptotic_covariance, build_noise_moments, predicted_attack_statistic, AttackStatisticPrediction, CovarianceResult,
    MomentConvention, ResidualProjections, COVARIANCE_DIM_CAP,
};
use crate::detect::{
    chi2_series, cost_report, empirical_cost, optimal_cost, watermark_penalty, CostAccumulator, CostReport, DetectorConfig,
    DetectorSummary, ResidualWhitener, WindowedChi2,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, NumericsError, SolverOptions, Vector};
use crate::sim::{run_ensemble, run_nominal, run_replay_attack, simulate_with, AttackScenario, SimulationConfig};
use crate::stability::{stability_certificate, uplifted_spectral_check, SpectralCheckOptions, StabilityCertificate, UpliftedSpectrum};
use crate::stats::{Estimate, SecondMoments};
use crate::synthesis::{assemble_uplifted, LoopDesign, UpliftedSystem};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One-sided 99% normal quantile.
pub const Z_ONE_SIDED_99: f64 = 2.326_347_874_040_841;

/// Reference long-run costs of the three-tank example.
pub fn reference_cost(variant: WatermarkVariant) -> f64 {
    match variant {
        WatermarkVariant::None => 0.7907,
        WatermarkVariant::Gaussian => 1.0415,
        WatermarkVariant::Delay => 0.8712,
    }
}

/// Files written into one output directory.
#[derive(Debug)]
pub struct OutputSet {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutputSet {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
    {
        if !self.files.iter().any(|n| n == name) {
            self.files.push(name.to_string());
        }
        let mut w = BufWriter::new(fs::File::create(self.dir.join(name))?);
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.write_with(name, |w| w.write_all(text.as_bytes()))
    }

    /// Removes everything written so far.
    pub fn discard(&mut self) {
        for name in self.files.drain(..) {
            let _ = fs::remove_file(self.dir.join(name));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub n_runs: usize,
    pub config: ExperimentConfig,
    /// Files in the output directory besides the manifest.
    pub files: Vec<String>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub warnings: Vec<String>,
    /// Wall-clock seconds per stage. The only field that differs between
    /// reruns.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Output directory, warnings and stage timings of a running command.
#[derive(Debug)]
pub struct CommandContext {
    pub out: OutputSet,
    pub warnings: Vec<String>,
    timings: BTreeMap<String, f64>,
}

impl CommandContext {
    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let v = f();
        self.timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
        v
    }

    pub fn record_timing(&mut self, stage: &str, seconds: f64) {
        self.timings.insert(stage.to_string(), seconds);
    }
}

/// Runs `body` against a fresh output directory and writes the manifest.
/// On failure the partial outputs are removed and the manifest records the
/// error.
pub fn run_command<T>(
    command: &str,
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    n_runs: usize,
    body: impl FnOnce(&mut CommandContext) -> Result<T>,
) -> Result<(T, RunManifest)> {
    let mut ctx = CommandContext {
        out: OutputSet::create(out)?,
        warnings: Vec::new(),
        timings: BTreeMap::new(),
    };
    let result = body(&mut ctx);
    let error = match &result {
        Ok(_) => None,
        Err(e) => {
            ctx.out.discard();
            Some(e.to_string())
        }
    };
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed,
        n_runs,
        config: cfg.clone(),
        files: ctx.out.files().to_vec(),
        status: if error.is_some() { RunStatus::Failed } else { RunStatus::Completed },
        error,
        warnings: ctx.warnings,
        timings: ctx.timings,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.join(MANIFEST_FILE), json + "\n")?;
    result.map(|v| (v, manifest))
}

pub(crate) fn fmt_matrix(f: &mut fmt::Formatter<'_>, name: &str, m: &Matrix) -> fmt::Result {
    writeln!(f, "{name} ({}x{}):", m.nrows(), m.ncols())?;
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>12.6}")).collect();
        writeln!(f, "  {}", cells.join(" "))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synthesize
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthesisReport {
    pub name: Option<String>,
    pub design: LoopDesign,
    pub filter_residual: f64,
    pub control_residual: f64,
    /// `ρ(𝐀)` of the delay-free part.
    pub rho_current: f64,
    /// `ρ(𝐀 + 𝐁)`, the loop with a constant zero delay.
    pub rho_undelayed: f64,
    /// `Err` holds the reason the certificate was refused.
    pub certificate: std::result::Result<StabilityCertificate, String>,
    pub optimal_cost: f64,
    pub penalty: f64,
}

impl SynthesisReport {
    pub fn certificate_passes(&self) -> bool {
        self.certificate.as_ref().is_ok_and(|c| c.passes)
    }
}

pub fn synthesize_report(cfg: &ExperimentConfig) -> Result<SynthesisReport> {
    let opts = SolverOptions::default();
    let design = cfg.design()?;
    let aug = design.augmented();
    let c_lyap = cfg.c_lyap(aug.current.nrows())?;
    let certificate = match stability_certificate(&aug, &c_lyap, cfg.analysis.norm, &opts) {
        Ok(c) => Ok(c),
        Err(Error::Numerics(NumericsError::Unstable { spectral_radius })) => Err(format!(
            "refused: the delay-free loop has spectral radius {spectral_radius:.6} >= 1"
        )),
        Err(e) => return Err(e),
    };
    Ok(SynthesisReport {
        name: cfg.name.clone(),
        filter_residual: design.kalman.invariant_error(&design.plant, &design.noise)?,
        control_residual: design.lqg.invariant_error(&design.plant)?,
        rho_current: linalg::spectral_radius(&aug.current)?,
        rho_undelayed: linalg::spectral_radius(&(&aug.current + &aug.delayed))?,
        certificate,
        optimal_cost: optimal_cost(&design, &opts)?,
        penalty: watermark_penalty(&design)?,
        design,
    })
}

impl fmt::Display for SynthesisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = &self.design;
        writeln!(f, "design: {}", self.name.as_deref().unwrap_or("unnamed"))?;
        writeln!(f, "watermark: {}", d.watermark.label())?;
        fmt_matrix(f, "K", &d.lqg.k)?;
        fmt_matrix(f, "Delta", &d.lqg.delta)?;
        fmt_matrix(f, "L", &d.kalman.l)?;
        fmt_matrix(f, "M", &d.kalman.m)?;
        fmt_matrix(f, "P", &d.kalman.p)?;
        fmt_matrix(f, "Sigma_R", &d.kalman.sigma_r)?;
        fmt_matrix(f, "K_tau", &d.delay_gain())?;
        writeln!(f, "filter Riccati residual: {:.3e}", self.filter_residual)?;
        writeln!(f, "control Riccati residual: {:.3e}", self.control_residual)?;
        writeln!(f, "rho(A_aug): {:.6}", self.rho_current)?;
        writeln!(f, "rho(A_aug + B_aug): {:.6}", self.rho_undelayed)?;
        writeln!(f, "optimal cost J*: {:.6}", self.optimal_cost)?;
        writeln!(f, "watermark penalty: {:.6}", self.penalty)?;
        match &self.certificate {
            Ok(c) => {
                writeln!(f, "certificate ({:?} norm):", c.norm)?;
                writeln!(f, "  c = {:.6e}  eta_min = {:.6e}  eta_max = {:.6e}", c.c, c.eta_min, c.eta_max)?;
                writeln!(f, "  |A'HB| = {:.6e}  |B'HB| = {:.6e}", c.norm_ahb, c.norm_bhb)?;
                writeln!(f, "  alpha = {:.6}  beta = {:.6}  alpha+beta = {:.6}", c.alpha, c.beta, c.alpha + c.beta)?;
                writeln!(f, "  verdict: {}", if c.passes { "stable for every delay sequence" } else { "inconclusive" })
            }
            Err(reason) => writeln!(f, "certificate: {reason}"),
        }
    }
}

// ---------------------------------------------------------------------------
// simulate / attack
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracedRunSummary {
    pub steps: usize,
    pub threshold: f64,
    /// Clean-system mean of `g`, `(T+1) n_y`.
    pub clean_mean: f64,
    pub detector: DetectorSummary,
    pub empirical_cost: Option<f64>,
    pub burn_in: usize,
}

impl fmt::Display for TracedRunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let opt_t = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        writeln!(f, "steps: {}", self.steps)?;
        writeln!(f, "threshold psi: {:.4}", self.threshold)?;
        writeln!(f, "clean mean of g: {:.1}", self.clean_mean)?;
        writeln!(f, "mean g before attack: {}", opt(self.detector.mean_pre_attack))?;
        writeln!(f, "mean g after attack: {}", opt(self.detector.mean_post_attack))?;
        writeln!(f, "attack start: {}", opt_t(self.detector.attack_start))?;
        writeln!(f, "first alarm: {}", opt_t(self.detector.first_alarm))?;
        writeln!(f, "first alarm after attack: {}", opt_t(self.detector.first_alarm_after_attack))?;
        writeln!(f, "empirical cost (after {} steps): {}", self.burn_in, opt(self.empirical_cost))
    }
}

fn traced_run(cfg: &ExperimentConfig, seed: Option<u64>, attack: bool, ctx: &mut CommandContext) -> Result<TracedRunSummary> {
    let design = cfg.design()?;
    let mut sim = cfg.simulation(seed)?;
    if attack {
        if sim.scenario.is_none() {
            return Err(Error::invalid("attack", "the attack command needs an [attack] section"));
        }
    } else {
        sim.scenario = None;
    }
    let det = cfg.detector(design.plant.n_y())?;
    let burn_in = cfg.burn_in()?;

    let (real, virt) = ctx.timed("simulate", || {
        if attack {
            run_replay_attack(&design, &sim)
        } else {
            run_nominal(&design, &sim).map(|t| (t, None))
        }
    })?;
    let report = chi2_series(&real, &design, &det)?;
    let empirical_cost = (real.len() > burn_in)
        .then(|| empirical_cost(&real, &design.cost.q, &design.cost.r, burn_in))
        .transpose()?;

    if attack {
        ctx.out.write_with("trace_real.csv", |w| real.write_csv(w))?;
        if let Some(v) = &virt {
            ctx.out.write_with("trace_virtual.csv", |w| v.write_csv(w))?;
        }
    } else {
        ctx.out.write_with("trace.csv", |w| real.write_csv(w))?;
    }
    ctx.out.write_with("detector.csv", |w| report.write_csv(w))?;
    let summary = TracedRunSummary {
        steps: real.len(),
        threshold: det.threshold,
        clean_mean: (det.degrees_of_freedom(design.plant.n_y())) as f64,
        detector: report.summary,
        empirical_cost,
        burn_in,
    };
    ctx.out.write_text("summary.txt", &summary.to_string())?;
    Ok(summary)
}

/// Nominal run: `trace.csv`, `detector.csv`, `summary.txt`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path, seed: Option<u64>) -> Result<(TracedRunSummary, RunManifest)> {
    let s = seed.unwrap_or(cfg.sim.seed);
    run_command("simulate", cfg, out, s, 1, |ctx| traced_run(cfg, seed, false, ctx))
}

/// Replay-attack run: `trace_real.csv`, `trace_virtual.csv` in virtual mode,
/// `detector.csv`, `summary.txt`.
pub fn cmd_attack(cfg: &ExperimentConfig, out: &Path, seed: Option<u64>) -> Result<(TracedRunSummary, RunManifest)> {
    let s = seed.unwrap_or(cfg.sim.seed);
    run_command("attack", cfg, out, s, 1, |ctx| traced_run(cfg, seed, true, ctx))
}

// ---------------------------------------------------------------------------
// ensembles
// ---------------------------------------------------------------------------

/// Detector series of every ensemble member, indexed by window start.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEnsemble {
    pub window: usize,
    pub kappa: Vec<usize>,
    pub series: Vec<Vec<f64>>,
}

impl DetectionEnsemble {
    pub fn runs(&self) -> usize {
        self.series.len()
    }

    pub fn mean_series(&self) -> Vec<f64> {
        let n = self.series.len().max(1) as f64;
        (0..self.kappa.len()).map(|k| self.series.iter().map(|s| s[k]).sum::<f64>() / n).collect()
    }

    pub fn rate_curve(&self, threshold: f64) -> Result<Vec<f64>> {
        crate::detect::detection_rate_curve(&self.series, threshold)
    }

    /// Window start at which the alarm rate first reaches `level`.
    pub fn time_to_rate(&self, threshold: f64, level: f64) -> Result<Option<usize>> {
        let curve = self.rate_curve(threshold)?;
        Ok(crate::detect::first_crossing(&curve, level, 0).map(|i| self.kappa[i]))
    }

    /// Across-run estimate of each member's mean `g` over the selected
    /// window starts.
    pub fn window_mean(&self, select: impl Fn(usize) -> bool) -> Estimate {
        let idx: Vec<usize> = (0..self.kappa.len()).filter(|i| select(self.kappa[*i])).collect();
        if idx.is_empty() {
            return Estimate::default();
        }
        let per_run: Vec<f64> = self
            .series
            .iter()
            .map(|s| idx.iter().map(|i| s[*i]).sum::<f64>() / idx.len() as f64)
            .collect();
        Estimate::from_samples(&per_run)
    }
}

/// Streams `n_runs` members and keeps only their detector series.
pub fn detection_ensemble(design: &LoopDesign, sim: &SimulationConfig, det: &DetectorConfig, n_runs: usize) -> Result<DetectionEnsemble> {
    det.validate()?;
    let members = run_ensemble(sim, n_runs, |_, cfg| {
        let mut whitener = ResidualWhitener::for_design(design)?;
        let mut windows = WindowedChi2::new(det.window);
        let mut kappa = Vec::with_capacity(cfg.horizon);
        let mut g = Vec::with_capacity(cfg.horizon);
        simulate_with(design, cfg, |real, _| {
            if let Some((k, v)) = windows.push(whitener.quadratic(real)) {
                if k % det.stride == 0 {
                    kappa.push(k);
                    g.push(v);
                }
            }
        })?;
        Ok((kappa, g))
    })?;
    let kappa = members[0].0.clone();
    Ok(DetectionEnsemble {
        window: det.window,
        kappa,
        series: members.into_iter().map(|m| m.1).collect(),
    })
}

/// Paired comparison of post-attack blocks against the pre-attack level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTest {
    pub pre: Estimate,
    /// `(first window start, estimate of block mean − pre mean)` per block.
    pub blocks: Vec<(usize, Estimate)>,
    /// Smallest one-sided z statistic over the blocks.
    pub min_z: f64,
    /// Every block exceeds the pre-attack level at 99% confidence.
    pub sustained: bool,
}

/// Tests for a lasting increase of `g` after `attack_start`. Pre-attack
/// windows lie in `[burn_in, attack_start − T)`; post-attack windows are
/// cut into full blocks of `block_len` starts.
pub fn sustained_step(ens: &DetectionEnsemble, attack_start: usize, burn_in: usize, block_len: usize) -> StepTest {
    let pre_idx: Vec<usize> = (0..ens.kappa.len())
        .filter(|i| ens.kappa[*i] >= burn_in && ens.kappa[*i] + ens.window < attack_start)
        .collect();
    let post_idx: Vec<usize> = (0..ens.kappa.len()).filter(|i| ens.kappa[*i] >= attack_start).collect();
    let mean_over = |s: &[f64], idx: &[usize]| idx.iter().map(|i| s[*i]).sum::<f64>() / idx.len().max(1) as f64;
    let pre_runs: Vec<f64> = ens.series.iter().map(|s| mean_over(s, &pre_idx)).collect();
    let mut blocks = Vec::new();
    for chunk in post_idx.chunks_exact(block_len.max(1)) {
        let diffs: Vec<f64> = ens.series.iter().zip(&pre_runs).map(|(s, p)| mean_over(s, chunk) - p).collect();
        blocks.push((ens.kappa[chunk[0]], Estimate::from_samples(&diffs)));
    }
    let z = |e: &Estimate| if e.std_error > 0.0 { e.mean / e.std_error } else if e.mean > 0.0 { f64::INFINITY } else { 0.0 };
    let min_z = blocks.iter().map(|(_, e)| z(e)).fold(f64::INFINITY, f64::min);
    StepTest {
        pre: Estimate::from_samples(&pre_runs),
        sustained: !blocks.is_empty() && min_z > Z_ONE_SIDED_99,
        min_z: if blocks.is_empty() { 0.0 } else { min_z },
        blocks,
    }
}

/// Time-averaged stage cost over `steps` steps following `burn_in`.
pub fn long_run_cost(design: &LoopDesign, steps: usize, burn_in: usize, seed: u64) -> Result<f64> {
    let cfg = SimulationConfig::new(burn_in + steps, seed);
    let mut acc = CostAccumulator::for_design(design, burn_in);
    simulate_with(design, &cfg, |real, _| acc.push(real))?;
    acc.mean().ok_or_else(|| Error::invalid("cost horizon", "no steps after burn-in"))
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub cost_horizon: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct VariantBench {
    pub variant: WatermarkVariant,
    pub cost: CostReport,
    pub reference: f64,
    pub cost_steps: usize,
    pub cost_seconds: f64,
    pub detection_seconds: f64,
    pub rate: Vec<f64>,
    pub mean_g: Vec<f64>,
    pub time_to_half: Option<usize>,
    pub step: Option<StepTest>,
    pub ensemble: DetectionEnsemble,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub threshold: f64,
    pub window: usize,
    pub n_y: usize,
    pub runs: usize,
    pub burn_in: usize,
    pub attack_start: Option<usize>,
    pub kappa: Vec<usize>,
    pub variants: Vec<VariantBench>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn variant(&self, v: WatermarkVariant) -> Option<&VariantBench> {
        self.variants.iter().find(|b| b.variant == v)
    }

    fn csv_order(&self) -> Vec<&VariantBench> {
        [WatermarkVariant::Delay, WatermarkVariant::Gaussian, WatermarkVariant::None]
            .into_iter()
            .filter_map(|v| self.variant(v))
            .collect()
    }

    /// `t,rate_delay,rate_gaussian,rate_none`, with `t` the window start.
    pub fn write_rates_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        self.write_columns(&mut out, "rate", |b| &b.rate)
    }

    /// `t,g_delay,g_gaussian,g_none`: ensemble-mean detector statistic.
    pub fn write_mean_g_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        self.write_columns(&mut out, "g", |b| &b.mean_g)
    }

    fn write_columns<W: Write>(&self, out: &mut W, prefix: &str, col: impl Fn(&VariantBench) -> &Vec<f64>) -> std::io::Result<()> {
        let order = self.csv_order();
        let header: Vec<String> = order.iter().map(|b| format!("{prefix}_{}", b.variant.label())).collect();
        writeln!(out, "t,{}", header.join(","))?;
        for (i, k) in self.kappa.iter().enumerate() {
            let row: Vec<String> = order.iter().map(|b| crate::sim::format_float(col(b)[i])).collect();
            writeln!(out, "{k},{}", row.join(","))?;
        }
        Ok(())
    }

    /// `watermark,empirical,optimal,penalty,predicted,reference,relative_error,steps`
    pub fn write_costs_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "watermark,empirical,optimal,penalty,predicted,reference,relative_error,steps")?;
        for b in self.csv_order() {
            let c = &b.cost;
            let f = crate::sim::format_float;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                b.variant.label(),
                f(c.empirical),
                f(c.optimal),
                f(c.penalty),
                f(c.predicted),
                f(b.reference),
                f(c.empirical / b.reference - 1.0),
                b.cost_steps
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "runs: {}  window T: {}  threshold psi: {:.4}  clean mean: {}",
            self.runs,
            self.window,
            self.threshold,
            (self.window + 1) * self.n_y
        )?;
        writeln!(f, "{:<10} {:>10} {:>10} {:>10} {:>10} {:>8}", "watermark", "J_emp", "J_pred", "reference", "rel.err", "steps")?;
        for b in self.csv_order() {
            writeln!(
                f,
                "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>+9.2}% {:>8}",
                b.variant.label(),
                b.cost.empirical,
                b.cost.predicted,
                b.reference,
                100.0 * (b.cost.empirical / b.reference - 1.0),
                b.cost_steps
            )?;
        }
        writeln!(f, "{:<10} {:>14} {:>12} {:>12} {:>10}", "watermark", "time to 50%", "pre mean g", "post mean g", "min z")?;
        for b in self.csv_order() {
            let t50 = b.time_to_half.map_or("never".to_string(), |t| t.to_string());
            let post = self.attack_start.map(|s| b.ensemble.window_mean(|k| k >= s).mean);
            let (pre, z) = b.step.as_ref().map_or((f64::NAN, f64::NAN), |s| (s.pre.mean, s.min_z));
            writeln!(
                f,
                "{:<10} {:>14} {:>12.2} {:>12.2} {:>10.2}",
                b.variant.label(),
                t50,
                pre,
                post.unwrap_or(f64::NAN),
                z
            )?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// Detection ensembles and long-run costs for every watermark variant.
pub fn bench(cfg: &ExperimentConfig, opts: &BenchOptions) -> Result<BenchReport> {
    let solver = SolverOptions::default();
    let runs = opts.runs.unwrap_or(cfg.sim.n_runs);
    let seed = opts.seed.unwrap_or(cfg.sim.seed);
    let cost_steps = opts.cost_horizon.or(cfg.sim.cost_horizon).unwrap_or(1_000_000);
    let mut warnings = Vec::new();
    if runs < 100 {
        warnings.push(format!("{runs} runs is below the recommended 100; rate curves are coarse"));
    }
    let base = cfg.design()?;
    let n_y = base.plant.n_y();
    let det = cfg.detector(n_y)?;
    let sim = cfg.simulation(Some(seed))?;
    let burn_in = cfg.burn_in()?;
    let attack_start = sim.scenario.map(|s: AttackScenario| s.attack_start);

    let mut variants = Vec::new();
    for variant in WatermarkVariant::ALL {
        let design = base.with_watermark(cfg.watermark(&base.plant, variant)?)?;
        let start = Instant::now();
        let empirical = long_run_cost(&design, cost_steps, burn_in, seed)?;
        let cost_seconds = start.elapsed().as_secs_f64();
        let cost = cost_report(&design, empirical, &solver)?;

        let start = Instant::now();
        let ensemble = detection_ensemble(&design, &sim, &det, runs)?;
        let detection_seconds = start.elapsed().as_secs_f64();
        variants.push(VariantBench {
            variant,
            reference: reference_cost(variant),
            cost_steps,
            cost_seconds,
            detection_seconds,
            rate: ensemble.rate_curve(det.threshold)?,
            mean_g: ensemble.mean_series(),
            time_to_half: ensemble.time_to_rate(det.threshold, 0.5)?,
            step: attack_start.map(|s| sustained_step(&ensemble, s, burn_in, 500)),
            cost,
            ensemble,
        });
    }
    Ok(BenchReport {
        threshold: det.threshold,
        window: det.window,
        n_y,
        runs,
        burn_in,
        attack_start,
        kappa: variants[0].ensemble.kappa.clone(),
        variants,
        warnings,
    })
}

/// Writes `detection_rates.csv`, `mean_g.csv`, `costs.csv`, `bench.txt`.
pub fn write_bench(report: &BenchReport, out: &mut OutputSet) -> Result<()> {
    out.write_with("detection_rates.csv", |w| report.write_rates_csv(w))?;
    out.write_with("mean_g.csv", |w| report.write_mean_g_csv(w))?;
    out.write_with("costs.csv", |w| report.write_costs_csv(w))?;
    out.write_text("bench.txt", &report.to_string())
}

pub fn cmd_bench(cfg: &ExperimentConfig, out: &Path, opts: &BenchOptions) -> Result<(BenchReport, RunManifest)> {
    let seed = opts.seed.unwrap_or(cfg.sim.seed);
    let runs = opts.runs.unwrap_or(cfg.sim.n_runs);
    run_command("bench", cfg, out, seed, runs, |ctx| {
        let report = bench(cfg, opts)?;
        for b in &report.variants {
            ctx.record_timing(&format!("cost_{}", b.variant.label()), b.cost_seconds);
            ctx.record_timing(&format!("detection_{}", b.variant.label()), b.detection_seconds);
        }
        ctx.warnings.extend(report.warnings.iter().cloned());
        write_bench(&report, &mut ctx.out)?;
        Ok(report)
    })
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub seed: Option<u64>,
    /// Monte-Carlo members; zero skips the comparison.
    pub runs: usize,
    /// Steps per member before the state is sampled.
    pub horizon: usize,
    pub noise_scale: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            seed: None,
            runs: 2000,
            horizon: 2000,
            noise_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloComparison {
    pub runs: usize,
    pub horizon: usize,
    /// Ensemble `E[x† x†ᵀ]` at the last step.
    pub moments: Matrix,
    pub std_error: Matrix,
    /// Largest `|𝒞 − empirical| / SE` over the current slot.
    pub max_z: f64,
    /// Attacked detector statistic over the last window.
    pub g: Estimate,
    pub predicted_g: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct AnalysisReport {
    pub dim: usize,
    pub convention: MomentConvention,
    pub spectrum: UpliftedSpectrum,
    pub covariance: CovarianceResult,
    pub prediction: AttackStatisticPrediction,
    pub penalty: f64,
    pub monte_carlo: Option<MonteCarloComparison>,
}

/// Uplifted system of an attacker that copies the delay distribution.
pub fn attacked_uplift(design: &LoopDesign) -> Result<UpliftedSystem> {
    let delays = design
        .watermark
        .delays()
        .ok_or_else(|| Error::invalid("watermark", "covariance analysis needs the delay watermark"))?;
    assemble_uplifted(&design.drive_response(), delays, delays)
}

/// Runs an attacker replaying a virtual copy from step 0 and samples
/// `(x, x̂, x′, x̂′)` at the last step together with the last window of `g′`.
pub fn attacked_ensemble(
    design: &LoopDesign,
    runs: usize,
    horizon: usize,
    seed: u64,
    window: usize,
    noise_scale: f64,
) -> Result<(SecondMoments, Estimate)> {
    if horizon < window + 1 {
        return Err(Error::invalid("horizon", format!("needs at least {} steps", window + 1)));
    }
    let sim = SimulationConfig::new(horizon, seed)
        .with_scenario(AttackScenario::virtual_system(0))
        .with_noise_scale(noise_scale);
    let n = design.plant.n_x();
    let members = run_ensemble(&sim, runs, |_, cfg| {
        let mut whitener = ResidualWhitener::for_design(design)?;
        let mut windows = WindowedChi2::new(window);
        let mut last_g = 0.0;
        let mut z = Vector::zeros(4 * n);
        simulate_with(design, cfg, |real, virt| {
            if let Some((_, g)) = windows.push(whitener.quadratic(real)) {
                last_g = g;
            }
            if real.t + 1 == cfg.horizon {
                let v = virt.expect("virtual mode");
                z.rows_mut(0, n).copy_from(&real.x);
                z.rows_mut(n, n).copy_from(&real.xhat);
                z.rows_mut(2 * n, n).copy_from(&v.x);
                z.rows_mut(3 * n, n).copy_from(&v.xhat);
            }
        })?;
        Ok((z, last_g))
    })?;
    let mut moments = SecondMoments::new(4 * n);
    for (z, _) in &members {
        moments.push(z);
    }
    let g: Vec<f64> = members.iter().map(|m| m.1).collect();
    Ok((moments, Estimate::from_samples(&g)))
}

pub fn analyze(cfg: &ExperimentConfig, opts: &AnalyzeOptions) -> Result<AnalysisReport> {
    let solver = SolverOptions::default();
    let design = cfg.design()?;
    let up = attacked_uplift(&design)?;
    if up.dim() > COVARIANCE_DIM_CAP {
        return Err(Error::ResourceCap {
            dim: up.dim(),
            cap: COVARIANCE_DIM_CAP,
        });
    }
    let spectrum = uplifted_spectral_check(
        &up,
        &SpectralCheckOptions {
            seed: opts.seed.unwrap_or(cfg.sim.seed),
            ..SpectralCheckOptions::default()
        },
    )?;
    let convention = cfg.analysis.convention;
    let moments = build_noise_moments(&design.noise, &up.real_delays, &up.attack_delays, convention)?.scaled(opts.noise_scale);
    let covariance = asymptotic_covariance(&up, &moments, &solver)?;
    let det = cfg.detector(design.plant.n_y())?;
    let mut prediction = predicted_attack_statistic(
        &covariance,
        &ResidualProjections::new(&up),
        &design.kalman,
        &design.plant,
        det.window_terms(),
    )?;
    if opts.noise_scale != 1.0 {
        // The measurement-noise floor scales with the noise as well.
        let s2 = opts.noise_scale * opts.noise_scale;
        let sr_inv = linalg::spd_inverse(&design.kalman.sigma_r, "residual covariance")?;
        let floor = (&sr_inv * &design.noise.sigma_v).trace();
        prediction.filter_error += (s2 - 1.0) * floor;
        prediction.mean = prediction.window_terms as f64 * (prediction.n_y as f64 * s2 + prediction.excess_per_step());
    }
    let monte_carlo = if opts.runs > 0 {
        let (mc, g) = attacked_ensemble(
            &design,
            opts.runs,
            opts.horizon,
            opts.seed.unwrap_or(cfg.sim.seed),
            det.window,
            opts.noise_scale,
        )?;
        let top = covariance.top_slot();
        let (emp, se) = (mc.mean(), mc.std_error());
        let mut max_z: f64 = 0.0;
        for i in 0..top.nrows() {
            for j in 0..top.ncols() {
                let d = (top[(i, j)] - emp[(i, j)]).abs();
                let z = if se[(i, j)] > 0.0 { d / se[(i, j)] } else if d > 0.0 { f64::INFINITY } else { 0.0 };
                max_z = max_z.max(z);
            }
        }
        let relative_error = if prediction.mean == 0.0 && g.mean == 0.0 {
            0.0
        } else {
            (g.mean - prediction.mean).abs() / prediction.mean.abs()
        };
        Some(MonteCarloComparison {
            runs: opts.runs,
            horizon: opts.horizon,
            moments: emp,
            std_error: se,
            max_z,
            g,
            predicted_g: prediction.mean,
            relative_error,
        })
    } else {
        None
    };
    Ok(AnalysisReport {
        dim: up.dim(),
        convention,
        spectrum,
        penalty: watermark_penalty(&design)?,
        covariance,
        prediction,
        monte_carlo,
    })
}

impl fmt::Display for AnalysisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "uplifted dimension: {}", self.dim)?;
        writeln!(f, "moment convention: {:?}", self.convention)?;
        writeln!(f, "rho(mean transition): {:.6}", self.spectrum.rho_mean)?;
        writeln!(
            f,
            "rho(second-moment operator): {:.6} ({})",
            self.spectrum.rho_second_moment,
            if self.spectrum.explicit { "dense" } else { "power iteration" }
        )?;
        writeln!(f, "transition products decay: {}", self.spectrum.transition_decay)?;
        writeln!(f, "fixed point: {} iterations, residual {:.3e}", self.covariance.iterations, self.covariance.residual)?;
        let p = &self.prediction;
        writeln!(f, "predicted attacked mean of g: {:.6}", p.mean)?;
        writeln!(f, "  estimate gap per step: {:.6}", p.estimate_gap)?;
        writeln!(f, "  cross term per step: {:.3e}", p.cross)?;
        writeln!(f, "  filter error per step: {:.6}", p.filter_error)?;
        writeln!(f, "watermark penalty: {:.6}", self.penalty)?;
        let top = self.covariance.top_slot();
        match &self.monte_carlo {
            None => fmt_matrix(f, "current-slot covariance", &top),
            Some(mc) => {
                writeln!(f, "Monte Carlo: {} runs of {} steps", mc.runs, mc.horizon)?;
                writeln!(f, "{:>4} {:>4} {:>14} {:>14} {:>12} {:>8}", "i", "j", "analytic", "empirical", "std.err", "z")?;
                for i in 0..top.nrows() {
                    for j in i..top.ncols() {
                        let se = mc.std_error[(i, j)];
                        let d = (top[(i, j)] - mc.moments[(i, j)]).abs();
                        writeln!(
                            f,
                            "{i:>4} {j:>4} {:>14.6} {:>14.6} {:>12.6} {:>8.2}",
                            top[(i, j)],
                            mc.moments[(i, j)],
                            se,
                            if se > 0.0 { d / se } else { 0.0 }
                        )?;
                    }
                }
                writeln!(f, "largest z: {:.2}", mc.max_z)?;
                writeln!(
                    f,
                    "g: predicted {:.4}, empirical {:.4} +- {:.4}, relative error {:.2}%",
                    mc.predicted_g,
                    mc.g.mean,
                    mc.g.std_error,
                    100.0 * mc.relative_error
                )
            }
        }
    }
}

/// Writes `analysis.txt` and `covariance_top.csv`.
pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path, opts: &AnalyzeOptions) -> Result<(AnalysisReport, RunManifest)> {
    let seed = opts.seed.unwrap_or(cfg.sim.seed);
    run_command("analyze", cfg, out, seed, opts.runs, |ctx| {
        let report = ctx.timed("analyze", || analyze(cfg, opts))?;
        ctx.out.write_text("analysis.txt", &report.to_string())?;
        ctx.out.write_with("covariance_top.csv", |w| report.covariance.write_top_slot_csv(w))?;
        Ok(report)
    })
}
