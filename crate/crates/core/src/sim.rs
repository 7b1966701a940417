//! Seeded time-domain simulation of the watermarked loop, with and without a
//! record-and-replay attack.
//!
//! Randomness: every noise source has its own ChaCha20 stream, selected by
//! `set_stream(source id)` on a generator seeded with
//! `ChaCha20Rng::seed_from_u64(seed)`. Gaussian draws use the ziggurat
//! `StandardNormal` sampler of `rand_distr`; delays use one `f64` uniform per
//! draw through the inverse CDF. Sources never share a stream, so changing
//! one source's seed leaves the others' sequences untouched.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::synthesis::{DelaySampler, LoopDesign, UpliftedSystem, Watermark};

/// State or estimate norm that aborts a run.
pub const BLOW_UP_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSource {
    Process,
    Measurement,
    AttackProcess,
    AttackMeasurement,
    Delay,
    AttackDelay,
    Watermark,
    AttackWatermark,
}

impl NoiseSource {
    pub fn stream_id(self) -> u64 {
        self as u64
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub master_seed: u64,
    /// Per-source seeds that replace `master_seed` for that source only.
    #[serde(default)]
    pub overrides: Vec<(NoiseSource, u64)>,
}

impl RngSpec {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            overrides: Vec::new(),
        }
    }

    pub fn with_override(mut self, source: NoiseSource, seed: u64) -> Self {
        self.overrides.retain(|(s, _)| *s != source);
        self.overrides.push((source, seed));
        self
    }

    pub fn seed_for(&self, source: NoiseSource) -> u64 {
        self.overrides
            .iter()
            .find(|(s, _)| *s == source)
            .map(|(_, seed)| *seed)
            .unwrap_or(self.master_seed)
    }

    pub fn stream(&self, source: NoiseSource) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed_for(source));
        rng.set_stream(source.stream_id());
        rng
    }

    /// Seeds of ensemble member `index`. Member 0 is `self`; the others mix
    /// the index into every seed with SplitMix64.
    pub fn for_run(&self, index: usize) -> RngSpec {
        if index == 0 {
            return self.clone();
        }
        let mix = |seed: u64| splitmix64(seed ^ splitmix64(index as u64));
        RngSpec {
            master_seed: mix(self.master_seed),
            overrides: self.overrides.iter().map(|(s, seed)| (*s, mix(*seed))).collect(),
        }
    }
}

/// How the replayed measurements `y′` are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReplayMode {
    /// Replay the real system's own outputs recorded over
    /// `[record_start, record_end)`, looping modulo the window length.
    Recorded { record_start: usize, record_end: usize },
    /// An independent copy of the loop, with its own noise and delays, runs
    /// in parallel and supplies `y′` online.
    VirtualSystem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackScenario {
    /// First step `t′` at which the controller sees `y′` instead of `y`.
    pub attack_start: usize,
    pub mode: ReplayMode,
}

impl AttackScenario {
    pub fn recorded(record_start: usize, record_end: usize, attack_start: usize) -> Self {
        Self {
            attack_start,
            mode: ReplayMode::Recorded { record_start, record_end },
        }
    }

    pub fn virtual_system(attack_start: usize) -> Self {
        Self {
            attack_start,
            mode: ReplayMode::VirtualSystem,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ReplayMode::Recorded { record_start, record_end } = self.mode {
            if !(record_start < record_end && record_end < self.attack_start) {
                return Err(Error::invalid(
                    "attack",
                    format!("need t_start < t_end < t_prime, got {record_start}, {record_end}, {}", self.attack_start),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub x: Vector,
    pub xhat: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub horizon: usize,
    pub rng: RngSpec,
    pub scenario: Option<AttackScenario>,
    /// Initial plant state and prediction, shared by the virtual copy.
    /// Defaults to zero.
    pub initial: Option<InitialState>,
    /// Multiplies every Gaussian draw (process, measurement, watermark).
    pub noise_scale: f64,
}

impl SimulationConfig {
    pub fn new(horizon: usize, seed: u64) -> Self {
        Self {
            horizon,
            rng: RngSpec::new(seed),
            scenario: None,
            initial: None,
            noise_scale: 1.0,
        }
    }

    pub fn with_scenario(mut self, scenario: AttackScenario) -> Self {
        self.scenario = Some(scenario);
        self
    }

    pub fn with_initial(mut self, x: Vector, xhat: Vector) -> Self {
        self.initial = Some(InitialState { x, xhat });
        self
    }

    pub fn with_noise_scale(mut self, scale: f64) -> Self {
        self.noise_scale = scale;
        self
    }

    /// The same configuration with ensemble member `index`'s seeds.
    pub fn for_run(&self, index: usize) -> Self {
        Self {
            rng: self.rng.for_run(index),
            ..self.clone()
        }
    }

    pub fn validate(&self, design: &LoopDesign) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("sim.horizon", "must be positive"));
        }
        if let Some(delays) = design.watermark.delays() {
            if self.horizon <= delays.max_delay() {
                return Err(Error::invalid(
                    "sim.horizon",
                    format!("must exceed the maximum delay {}", delays.max_delay()),
                ));
            }
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::invalid("sim.noise_scale", "must be finite and nonnegative"));
        }
        if let Some(init) = &self.initial {
            let n = design.plant.n_x();
            if init.x.len() != n || init.xhat.len() != n {
                return Err(Error::invalid("sim.initial", format!("states must have length {n}")));
            }
        }
        if let Some(s) = &self.scenario {
            s.validate()?;
        }
        Ok(())
    }
}

/// One time step of one loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vector,
    /// Predicted estimate `x̂_t = x_{t|t−1}`.
    pub xhat: Vector,
    /// Updated estimate `x̃_t = x_{t|t}`.
    pub xupd: Vector,
    pub u: Vector,
    pub y: Vector,
    /// What the controller received: `y` or the replayed `y′`.
    pub y_obs: Vector,
    pub tau: Option<usize>,
    pub attack_active: bool,
}

impl StepRecord {
    fn zeros(n_x: usize, n_u: usize, n_y: usize) -> Self {
        Self {
            t: 0,
            x: Vector::zeros(n_x),
            xhat: Vector::zeros(n_x),
            xupd: Vector::zeros(n_x),
            u: Vector::zeros(n_u),
            y: Vector::zeros(n_y),
            y_obs: Vector::zeros(n_y),
            tau: None,
            attack_active: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<StepRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Innovations `y_obs,t − Cx̂_t`.
    pub fn residuals(&self, c: &Matrix) -> Vec<Vector> {
        self.records.iter().map(|r| &r.y_obs - c * &r.xhat).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let Some(first) = self.records.first() else {
            return writeln!(out, "t,tau,attack_active");
        };
        let mut header = vec!["t".to_string()];
        for (name, n) in [
            ("x", first.x.len()),
            ("xhat", first.xhat.len()),
            ("xupd", first.xupd.len()),
            ("u", first.u.len()),
            ("y", first.y.len()),
            ("y_obs", first.y_obs.len()),
        ] {
            header.extend((0..n).map(|i| format!("{name}[{i}]")));
        }
        header.push("tau".into());
        header.push("attack_active".into());
        writeln!(out, "{}", header.join(","))?;
        let mut line = String::new();
        for r in &self.records {
            line.clear();
            line.push_str(&r.t.to_string());
            for v in [&r.x, &r.xhat, &r.xupd, &r.u, &r.y, &r.y_obs] {
                for e in v.iter() {
                    line.push(',');
                    line.push_str(&format_float(*e));
                }
            }
            line.push(',');
            line.push_str(&r.tau.unwrap_or(0).to_string());
            line.push(',');
            line.push(if r.attack_active { '1' } else { '0' });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Decimal text with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Ring buffer of the last `capacity` pushed vectors.
#[derive(Debug, Clone)]
pub(crate) struct DelayLine {
    buf: Vec<Vector>,
    head: usize,
    len: usize,
}

impl DelayLine {
    pub(crate) fn new(capacity: usize, dim: usize) -> Self {
        Self {
            buf: vec![Vector::zeros(dim); capacity.max(1)],
            head: 0,
            len: 0,
        }
    }

    pub(crate) fn push(&mut self, v: &Vector) {
        let cap = self.buf.len();
        self.head = (self.head + 1) % cap;
        self.buf[self.head].copy_from(v);
        self.len = (self.len + 1).min(cap);
    }

    /// Entry pushed `lag` pushes before the latest one; `back(0)` is the
    /// latest. `None` before enough history exists.
    pub(crate) fn back(&self, lag: usize) -> Option<&Vector> {
        let cap = self.buf.len();
        (lag < self.len).then(|| &self.buf[(self.head + cap - lag) % cap])
    }
}

/// `out = scale · factor · z`, `z` standard normal.
pub(crate) fn draw_gaussian<R: Rng>(rng: &mut R, factor: &Matrix, scale: f64, z: &mut Vector, out: &mut Vector) {
    for zi in z.iter_mut() {
        *zi = rng.sample(StandardNormal);
    }
    out.gemv(scale, factor, z, 0.0);
}

struct GaussianSource {
    rng: ChaCha20Rng,
    factor: Matrix,
    z: Vector,
}

impl GaussianSource {
    fn new(rng: ChaCha20Rng, covariance: &Matrix) -> Result<Self> {
        Ok(Self {
            rng,
            factor: linalg::psd_factor(covariance)?,
            z: Vector::zeros(covariance.nrows()),
        })
    }

    fn draw(&mut self, scale: f64, out: &mut Vector) {
        draw_gaussian(&mut self.rng, &self.factor, scale, &mut self.z, out);
    }
}

struct DelaySource {
    rng: ChaCha20Rng,
    sampler: DelaySampler,
}

/// One closed loop (plant, filter, controller) with its own noise streams.
struct LoopSim {
    x: Vector,
    xhat: Vector,
    rec: StepRecord,
    history: DelayLine,
    innovation: Vector,
    scratch: Vector,
    w: Vector,
    v: Vector,
    wm: Vector,
    process: GaussianSource,
    measurement: GaussianSource,
    delay: Option<DelaySource>,
    gaussian_wm: Option<GaussianSource>,
    delay_gain: Matrix,
}

struct LoopSources {
    process: NoiseSource,
    measurement: NoiseSource,
    delay: NoiseSource,
    watermark: NoiseSource,
}

const REAL_SOURCES: LoopSources = LoopSources {
    process: NoiseSource::Process,
    measurement: NoiseSource::Measurement,
    delay: NoiseSource::Delay,
    watermark: NoiseSource::Watermark,
};

const VIRTUAL_SOURCES: LoopSources = LoopSources {
    process: NoiseSource::AttackProcess,
    measurement: NoiseSource::AttackMeasurement,
    delay: NoiseSource::AttackDelay,
    watermark: NoiseSource::AttackWatermark,
};

impl LoopSim {
    fn new(design: &LoopDesign, cfg: &SimulationConfig, sources: &LoopSources) -> Result<Self> {
        let p = &design.plant;
        let (n_x, n_u, n_y) = (p.n_x(), p.n_u(), p.n_y());
        let (x, xhat) = match &cfg.initial {
            Some(init) => (init.x.clone(), init.xhat.clone()),
            None => (Vector::zeros(n_x), Vector::zeros(n_x)),
        };
        let delay = design.watermark.delays().map(|d| DelaySource {
            rng: cfg.rng.stream(sources.delay),
            sampler: d.sampler(),
        });
        let gaussian_wm = match &design.watermark {
            Watermark::GaussianAdditive { covariance } => Some(GaussianSource::new(cfg.rng.stream(sources.watermark), covariance)?),
            _ => None,
        };
        let max_delay = design.watermark.delays().map_or(0, |d| d.max_delay());
        Ok(Self {
            x,
            xhat,
            rec: StepRecord::zeros(n_x, n_u, n_y),
            history: DelayLine::new(max_delay + 1, n_x),
            innovation: Vector::zeros(n_y),
            scratch: Vector::zeros(n_x),
            w: Vector::zeros(p.n_w()),
            v: Vector::zeros(n_y),
            wm: Vector::zeros(n_u),
            process: GaussianSource::new(cfg.rng.stream(sources.process), &design.noise.sigma_w)?,
            measurement: GaussianSource::new(cfg.rng.stream(sources.measurement), &design.noise.sigma_v)?,
            delay,
            gaussian_wm,
            delay_gain: design.delay_gain(),
        })
    }

    /// Records `x_t`, `x̂_t` and the true output `y_t`.
    fn measure(&mut self, design: &LoopDesign, scale: f64, t: usize) {
        self.rec.t = t;
        self.rec.x.copy_from(&self.x);
        self.rec.xhat.copy_from(&self.xhat);
        self.measurement.draw(scale, &mut self.v);
        self.rec.y.gemv(1.0, &design.plant.c, &self.x, 0.0);
        self.rec.y += &self.v;
    }

    /// Filter update, control, and state advance given what the controller
    /// observes.
    fn close(&mut self, design: &LoopDesign, scale: f64, observed: Option<&Vector>, attack_active: bool) -> Result<()> {
        let plant = &design.plant;
        let rec = &mut self.rec;
        match observed {
            Some(y) => rec.y_obs.copy_from(y),
            None => rec.y_obs.copy_from(&rec.y),
        }
        rec.attack_active = attack_active;

        self.innovation.copy_from(&rec.y_obs);
        self.innovation.gemv(-1.0, &plant.c, &self.xhat, 1.0);
        rec.xupd.copy_from(&self.xhat);
        rec.xupd.gemv(1.0, &design.kalman.m, &self.innovation, 1.0);
        self.history.push(&rec.xupd);

        rec.u.gemv(-1.0, &design.lqg.k, &rec.xupd, 0.0);
        rec.tau = None;
        if let Some(delay) = &mut self.delay {
            let tau = delay.sampler.sample(&mut delay.rng);
            rec.tau = Some(tau);
            if let Some(past) = self.history.back(tau) {
                rec.u.gemv(-1.0, &self.delay_gain, past, 1.0);
            }
        }
        if let Some(wm) = &mut self.gaussian_wm {
            wm.draw(scale, &mut self.wm);
            rec.u += &self.wm;
        }

        self.scratch.gemv(1.0, &plant.a, &self.xhat, 0.0);
        self.scratch.gemv(1.0, &plant.b, &rec.u, 1.0);
        self.scratch.gemv(1.0, &design.kalman.l, &self.innovation, 1.0);
        std::mem::swap(&mut self.xhat, &mut self.scratch);

        self.process.draw(scale, &mut self.w);
        self.scratch.gemv(1.0, &plant.a, &self.x, 0.0);
        self.scratch.gemv(1.0, &plant.b, &rec.u, 1.0);
        self.scratch.gemv(1.0, &plant.d, &self.w, 1.0);
        std::mem::swap(&mut self.x, &mut self.scratch);

        let norm = self.x.amax().max(self.xhat.amax());
        if !(norm <= BLOW_UP_NORM) {
            return Err(Error::BlowUp { step: rec.t, norm });
        }
        Ok(())
    }
}

/// Step-by-step simulator. Use [`run_nominal`] / [`run_replay_attack`] to
/// collect traces, or drive it directly to stream reductions.
pub struct Simulator<'a> {
    design: &'a LoopDesign,
    cfg: &'a SimulationConfig,
    real: LoopSim,
    virt: Option<LoopSim>,
    recorded: Vec<Vector>,
    t: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(design: &'a LoopDesign, cfg: &'a SimulationConfig) -> Result<Self> {
        cfg.validate(design)?;
        let virt = match cfg.scenario {
            Some(AttackScenario {
                mode: ReplayMode::VirtualSystem,
                ..
            }) => Some(LoopSim::new(design, cfg, &VIRTUAL_SOURCES)?),
            _ => None,
        };
        Ok(Self {
            design,
            cfg,
            real: LoopSim::new(design, cfg, &REAL_SOURCES)?,
            virt,
            recorded: Vec::new(),
            t: 0,
        })
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn is_finished(&self) -> bool {
        self.t >= self.cfg.horizon
    }

    /// Advances one step; afterwards [`Simulator::real`] and
    /// [`Simulator::virtual_system`] describe the step just taken.
    pub fn step(&mut self) -> Result<()> {
        let t = self.t;
        let scale = self.cfg.noise_scale;
        self.real.measure(self.design, scale, t);
        if let Some(v) = &mut self.virt {
            v.measure(self.design, scale, t);
        }

        let attack_active = self.cfg.scenario.is_some_and(|s| t >= s.attack_start);
        let mut replayed: Option<Vector> = None;
        if let Some(scenario) = &self.cfg.scenario {
            match scenario.mode {
                ReplayMode::Recorded { record_start, record_end } => {
                    if (record_start..record_end).contains(&t) {
                        self.recorded.push(self.real.rec.y.clone());
                    }
                    if attack_active {
                        let idx = (t - scenario.attack_start) % (record_end - record_start);
                        replayed = Some(self.recorded[idx].clone());
                    }
                }
                ReplayMode::VirtualSystem => {
                    if attack_active {
                        replayed = self.virt.as_ref().map(|v| v.rec.y.clone());
                    }
                }
            }
        }

        self.real.close(self.design, scale, replayed.as_ref(), attack_active)?;
        if let Some(v) = &mut self.virt {
            v.close(self.design, scale, None, false)?;
        }
        self.t += 1;
        Ok(())
    }

    pub fn real(&self) -> &StepRecord {
        &self.real.rec
    }

    pub fn virtual_system(&self) -> Option<&StepRecord> {
        self.virt.as_ref().map(|v| &v.rec)
    }
}

/// Runs the full horizon, calling `visit(real, virtual)` after every step.
pub fn simulate_with<F>(design: &LoopDesign, cfg: &SimulationConfig, mut visit: F) -> Result<()>
where
    F: FnMut(&StepRecord, Option<&StepRecord>),
{
    let mut sim = Simulator::new(design, cfg)?;
    while !sim.is_finished() {
        sim.step()?;
        visit(sim.real(), sim.virtual_system());
    }
    Ok(())
}

pub fn run_nominal(design: &LoopDesign, cfg: &SimulationConfig) -> Result<Trace> {
    if cfg.scenario.is_some() {
        return Err(Error::invalid("attack", "nominal runs take no attack scenario"));
    }
    let mut trace = Trace::default();
    trace.records.reserve(cfg.horizon);
    simulate_with(design, cfg, |real, _| trace.records.push(real.clone()))?;
    Ok(trace)
}

/// Returns the real system's trace and, in virtual-system mode, the
/// attacker's copy.
pub fn run_replay_attack(design: &LoopDesign, cfg: &SimulationConfig) -> Result<(Trace, Option<Trace>)> {
    let Some(scenario) = cfg.scenario else {
        return Err(Error::invalid("attack", "replay runs need an attack scenario"));
    };
    let mut real = Trace::default();
    let mut virt = matches!(scenario.mode, ReplayMode::VirtualSystem).then(Trace::default);
    simulate_with(design, cfg, |r, v| {
        real.records.push(r.clone());
        if let (Some(trace), Some(rec)) = (virt.as_mut(), v) {
            trace.records.push(rec.clone());
        }
    })?;
    Ok((real, virt))
}

/// Number of worker threads for ensembles: `DELAYMARK_THREADS` if set,
/// otherwise rayon's default.
pub fn ensemble_threads() -> Option<usize> {
    std::env::var("DELAYMARK_THREADS").ok().and_then(|s| s.trim().parse().ok()).filter(|n| *n > 0)
}

/// Runs `job` on ensemble members `0..n_runs` (member `i` uses
/// `cfg.for_run(i)`) in parallel and returns results in member order.
pub fn run_ensemble<T, F>(cfg: &SimulationConfig, n_runs: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &SimulationConfig) -> Result<T> + Sync,
{
    if n_runs == 0 {
        return Err(Error::invalid("sim.n_runs", "must be at least 1"));
    }
    let work = || (0..n_runs).into_par_iter().map(|i| job(i, &cfg.for_run(i))).collect::<Result<Vec<T>>>();
    match ensemble_threads() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// Matrix-level simulation of the augmented loop `(x, x̂)`, consuming the
/// same streams as [`run_nominal`]. Returns the state at every step.
pub fn simulate_augmented(design: &LoopDesign, cfg: &SimulationConfig) -> Result<Vec<Vector>> {
    cfg.validate(design)?;
    if matches!(design.watermark, Watermark::GaussianAdditive { .. }) {
        return Err(Error::invalid("watermark", "the augmented form covers delay feedback only"));
    }
    let aug = design.augmented();
    let p = &design.plant;
    let (n, n_w, n_y) = (p.n_x(), p.n_w(), p.n_y());
    let max_delay = design.watermark.delays().map_or(0, |d| d.max_delay());
    let mut states = DelayLine::new(max_delay + 1, 2 * n);
    let mut meas = DelayLine::new(max_delay + 1, n_y);
    let mut process = GaussianSource::new(cfg.rng.stream(NoiseSource::Process), &design.noise.sigma_w)?;
    let mut measurement = GaussianSource::new(cfg.rng.stream(NoiseSource::Measurement), &design.noise.sigma_v)?;
    let mut delay = design.watermark.delays().map(|d| (cfg.rng.stream(NoiseSource::Delay), d.sampler()));

    let mut state = Vector::zeros(2 * n);
    if let Some(init) = &cfg.initial {
        state.rows_mut(0, n).copy_from(&init.x);
        state.rows_mut(n, n).copy_from(&init.xhat);
    }
    let mut w = Vector::zeros(n_w);
    let mut v = Vector::zeros(n_y);
    let mut noise = Vector::zeros(n_w + 2 * n_y);
    let mut out = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        out.push(state.clone());
        measurement.draw(cfg.noise_scale, &mut v);
        process.draw(cfg.noise_scale, &mut w);
        states.push(&state);
        meas.push(&v);
        noise.fill(0.0);
        noise.rows_mut(0, n_w).copy_from(&w);
        noise.rows_mut(n_w, n_y).copy_from(&v);
        let mut next = &aug.current * &state;
        if let Some((rng, sampler)) = &mut delay {
            let tau = sampler.sample(rng);
            if let (Some(past), Some(past_v)) = (states.back(tau), meas.back(tau)) {
                next.gemv(1.0, &aug.delayed, past, 1.0);
                noise.rows_mut(n_w + n_y, n_y).copy_from(past_v);
            }
        }
        next.gemv(1.0, &aug.noise, &noise, 1.0);
        state = next;
        if state.amax() > BLOW_UP_NORM {
            return Err(Error::BlowUp { step: t, norm: state.amax() });
        }
    }
    Ok(out)
}

/// Draws for one step of the attacked loop: `(n†_t, τ_t, τ′_t)`.
struct DriveResponseNoise {
    process: GaussianSource,
    attack_process: GaussianSource,
    attack_measurement: GaussianSource,
    delay: (ChaCha20Rng, DelaySampler),
    attack_delay: (ChaCha20Rng, DelaySampler),
    replayed_noise: DelayLine,
    w: Vector,
    w_attack: Vector,
    v_attack: Vector,
    noise: Vector,
    n_w: usize,
    n_y: usize,
}

impl DriveResponseNoise {
    fn new(design: &LoopDesign, cfg: &SimulationConfig, up_delays: (&crate::synthesis::DelayDistribution, &crate::synthesis::DelayDistribution)) -> Result<Self> {
        let p = &design.plant;
        let (n_w, n_y) = (p.n_w(), p.n_y());
        let max_delay = up_delays.0.max_delay().max(up_delays.1.max_delay());
        Ok(Self {
            process: GaussianSource::new(cfg.rng.stream(NoiseSource::Process), &design.noise.sigma_w)?,
            attack_process: GaussianSource::new(cfg.rng.stream(NoiseSource::AttackProcess), &design.noise.sigma_w)?,
            attack_measurement: GaussianSource::new(cfg.rng.stream(NoiseSource::AttackMeasurement), &design.noise.sigma_v)?,
            delay: (cfg.rng.stream(NoiseSource::Delay), up_delays.0.sampler()),
            attack_delay: (cfg.rng.stream(NoiseSource::AttackDelay), up_delays.1.sampler()),
            replayed_noise: DelayLine::new(max_delay + 1, n_y),
            w: Vector::zeros(n_w),
            w_attack: Vector::zeros(n_w),
            v_attack: Vector::zeros(n_y),
            noise: Vector::zeros(2 * n_w + 3 * n_y),
            n_w,
            n_y,
        })
    }

    fn draw(&mut self, scale: f64) -> (usize, usize) {
        let (n_w, n_y) = (self.n_w, self.n_y);
        self.attack_measurement.draw(scale, &mut self.v_attack);
        self.process.draw(scale, &mut self.w);
        self.attack_process.draw(scale, &mut self.w_attack);
        self.replayed_noise.push(&self.v_attack);
        let tau = self.delay.1.sample(&mut self.delay.0);
        let tau_a = self.attack_delay.1.sample(&mut self.attack_delay.0);
        self.noise.fill(0.0);
        self.noise.rows_mut(0, n_w).copy_from(&self.w);
        self.noise.rows_mut(n_w, n_w).copy_from(&self.w_attack);
        self.noise.rows_mut(2 * n_w, n_y).copy_from(&self.v_attack);
        if let Some(v) = self.replayed_noise.back(tau) {
            self.noise.rows_mut(2 * n_w + n_y, n_y).copy_from(v);
        }
        if let Some(v) = self.replayed_noise.back(tau_a) {
            self.noise.rows_mut(2 * n_w + 2 * n_y, n_y).copy_from(v);
        }
        (tau, tau_a)
    }
}

fn require_delay_watermark(design: &LoopDesign) -> Result<&crate::synthesis::DelayDistribution> {
    design
        .watermark
        .delays()
        .ok_or_else(|| Error::invalid("watermark", "matrix-level attacked simulation needs the delay-feedback variant"))
}

fn initial_drive_response(design: &LoopDesign, cfg: &SimulationConfig) -> Vector {
    let n = design.plant.n_x();
    let mut s = Vector::zeros(4 * n);
    if let Some(init) = &cfg.initial {
        for k in 0..2 {
            s.rows_mut(2 * k * n, n).copy_from(&init.x);
            s.rows_mut((2 * k + 1) * n, n).copy_from(&init.xhat);
        }
    }
    s
}

/// Matrix-level simulation of the drive-response system, attacked from
/// step 0. Consumes the same streams as [`run_replay_attack`] in
/// virtual-system mode. Returns `x†_t = (x, x̂, x′, x̂′)` at every step.
pub fn simulate_drive_response(design: &LoopDesign, cfg: &SimulationConfig) -> Result<Vec<Vector>> {
    cfg.validate(design)?;
    let delays = require_delay_watermark(design)?;
    let drs = design.drive_response();
    let dim = drs.state_dim();
    let max_delay = delays.max_delay();
    let mut history = DelayLine::new(max_delay + 1, dim);
    let mut draws = DriveResponseNoise::new(design, cfg, (delays, delays))?;
    let mut state = initial_drive_response(design, cfg);
    let mut out = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        out.push(state.clone());
        history.push(&state);
        let (tau, tau_a) = draws.draw(cfg.noise_scale);
        let mut next = &drs.current * &state;
        if let Some(past) = history.back(tau) {
            next.gemv(1.0, &drs.real_delayed, past, 1.0);
        }
        if let Some(past) = history.back(tau_a) {
            next.gemv(1.0, &drs.attack_delayed, past, 1.0);
        }
        next.gemv(1.0, &drs.noise, &draws.noise, 1.0);
        state = next;
        if state.amax() > BLOW_UP_NORM {
            return Err(Error::BlowUp { step: t, norm: state.amax() });
        }
    }
    Ok(out)
}

/// Simulation of the uplifted recursion `𝕏_{t+1} = 𝒜_{τ_t,τ′_t}𝕏_t + 𝒢ℕ_t`
/// with the same draws as [`simulate_drive_response`]. Returns `𝕏_t`.
pub fn simulate_uplifted(design: &LoopDesign, up: &UpliftedSystem, cfg: &SimulationConfig) -> Result<Vec<Vector>> {
    cfg.validate(design)?;
    let mut draws = DriveResponseNoise::new(design, cfg, (&up.real_delays, &up.attack_delays))?;
    let g = up.noise_input();
    let nb = up.block();
    let mut state = DVector::zeros(up.dim());
    state.rows_mut(0, nb).copy_from(&initial_drive_response(design, cfg));
    let mut out = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        out.push(state.clone());
        let (tau, tau_a) = draws.draw(cfg.noise_scale);
        let next = up.apply_transition(tau, tau_a, &Matrix::from_column_slice(up.dim(), 1, state.as_slice()));
        state = Vector::from_column_slice(next.as_slice());
        state.gemv(1.0, &g, &draws.noise, 1.0);
        if state.amax() > BLOW_UP_NORM {
            return Err(Error::BlowUp { step: t, norm: state.amax() });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SolverOptions;
    use crate::synthesis::{DelayDistribution, LqgCost, LtiPlant, NoiseModel};
    use approx::assert_relative_eq;

    fn s(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn scalar_design(wm: Watermark) -> LoopDesign {
        let plant = LtiPlant::new(s(0.5), s(1.0), s(1.0)).unwrap();
        let noise = NoiseModel::new(s(1.0), s(1.0)).unwrap();
        let cost = LqgCost::new(s(1.0), s(1.0)).unwrap();
        LoopDesign::new(plant, noise, cost, wm, &SolverOptions::default()).unwrap()
    }

    fn delay_wm(k: f64, max: usize) -> Watermark {
        Watermark::DelayFeedback {
            gain: s(k),
            delays: DelayDistribution::uniform(1, max).unwrap(),
        }
    }

    #[test]
    fn delay_line_lags() {
        let mut d = DelayLine::new(3, 1);
        assert!(d.back(0).is_none());
        for i in 0..5 {
            d.push(&Vector::from_element(1, i as f64));
        }
        assert_eq!(d.back(0).unwrap()[0], 4.0);
        assert_eq!(d.back(2).unwrap()[0], 2.0);
        assert!(d.back(3).is_none());
    }

    #[test]
    fn zero_noise_zero_state_is_silent() {
        let d = scalar_design(delay_wm(0.2, 3));
        let trace = run_nominal(&d, &SimulationConfig::new(50, 1).with_noise_scale(0.0)).unwrap();
        assert!(trace.records.iter().all(|r| r.x.amax() == 0.0 && r.u.amax() == 0.0 && r.y.amax() == 0.0));
    }

    #[test]
    fn noise_free_run_follows_matrix_powers() {
        let d = scalar_design(Watermark::None);
        let x0 = Vector::from_element(1, 2.0);
        let xh0 = Vector::from_element(1, -1.0);
        let cfg = SimulationConfig::new(30, 1).with_noise_scale(0.0).with_initial(x0.clone(), xh0.clone());
        let trace = run_nominal(&d, &cfg).unwrap();
        let a = d.augmented().current;
        let mut z = Vector::from_vec(vec![2.0, -1.0]);
        for r in &trace.records {
            assert_relative_eq!(r.x[0], z[0], epsilon = 1e-13);
            assert_relative_eq!(r.xhat[0], z[1], epsilon = 1e-13);
            z = &a * z;
        }
    }

    #[test]
    fn same_config_same_trace() {
        let d = scalar_design(delay_wm(0.2, 4));
        let cfg = SimulationConfig::new(500, 42);
        assert_eq!(run_nominal(&d, &cfg).unwrap(), run_nominal(&d, &cfg).unwrap());
        assert_ne!(run_nominal(&d, &cfg).unwrap(), run_nominal(&d, &SimulationConfig::new(500, 43)).unwrap());
    }

    #[test]
    fn delay_seed_does_not_touch_noise_streams() {
        // with a zero gain the delays cannot influence the states
        let d = scalar_design(delay_wm(0.0, 4));
        let a = SimulationConfig::new(300, 7);
        let mut b = a.clone();
        b.rng = b.rng.with_override(NoiseSource::Delay, 999);
        let ta = run_nominal(&d, &a).unwrap();
        let tb = run_nominal(&d, &b).unwrap();
        assert!(ta.records.iter().zip(&tb.records).all(|(p, q)| p.x == q.x && p.y == q.y));
        assert!(ta.records.iter().zip(&tb.records).any(|(p, q)| p.tau != q.tau));
    }

    #[test]
    fn attack_beyond_horizon_equals_nominal() {
        let d = scalar_design(delay_wm(0.2, 3));
        let base = SimulationConfig::new(400, 3);
        let nominal = run_nominal(&d, &base).unwrap();
        for scenario in [AttackScenario::virtual_system(10_000), AttackScenario::recorded(100, 200, 10_000)] {
            let (real, _) = run_replay_attack(&d, &base.clone().with_scenario(scenario)).unwrap();
            assert_eq!(real, nominal);
        }
    }

    #[test]
    fn noise_free_twin_is_indistinguishable() {
        let d = scalar_design(Watermark::None);
        let x0 = Vector::from_element(1, 1.5);
        let cfg = SimulationConfig::new(100, 5)
            .with_noise_scale(0.0)
            .with_initial(x0.clone(), x0.clone())
            .with_scenario(AttackScenario::virtual_system(0));
        let (real, virt) = run_replay_attack(&d, &cfg).unwrap();
        let virt = virt.unwrap();
        for (r, v) in real.records.iter().zip(&virt.records) {
            assert_relative_eq!(r.x, v.x, epsilon = 1e-14);
            assert_relative_eq!(r.xhat, v.xhat, epsilon = 1e-14);
        }
        assert!(real.residuals(&d.plant.c).iter().all(|e| e.amax() < 1e-12));

        let d = scalar_design(delay_wm(0.3, 3));
        let cfg = SimulationConfig::new(100, 5).with_noise_scale(0.0).with_scenario(AttackScenario::virtual_system(0));
        let (real, virt) = run_replay_attack(&d, &cfg).unwrap();
        assert_eq!(real.records.iter().map(|r| r.x.clone()).collect::<Vec<_>>(), virt.unwrap().records.iter().map(|r| r.x.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn recorded_replay_loops_the_window() {
        let d = scalar_design(delay_wm(0.2, 3));
        let cfg = SimulationConfig::new(200, 9).with_scenario(AttackScenario::recorded(20, 30, 50));
        let (real, virt) = run_replay_attack(&d, &cfg).unwrap();
        assert!(virt.is_none());
        for r in &real.records {
            if r.t < 50 {
                assert!(!r.attack_active);
                assert_eq!(r.y_obs, r.y);
            } else {
                assert!(r.attack_active);
                let src = 20 + (r.t - 50) % 10;
                assert_eq!(r.y_obs, real.records[src].y);
            }
        }
    }

    #[test]
    fn bad_scenario_is_rejected() {
        let d = scalar_design(Watermark::None);
        let cfg = SimulationConfig::new(200, 9).with_scenario(AttackScenario::recorded(30, 20, 50));
        assert!(run_replay_attack(&d, &cfg).is_err());
        assert!(run_nominal(&d, &cfg).is_err());
        assert!(run_replay_attack(&d, &SimulationConfig::new(10, 1)).is_err());
    }

    #[test]
    fn blow_up_guard_trips() {
        let plant = LtiPlant::new(s(0.5), s(1.0), s(1.0)).unwrap();
        let noise = NoiseModel::new(s(1.0), s(1.0)).unwrap();
        let cost = LqgCost::new(s(1.0), s(1.0)).unwrap();
        let wm = Watermark::DelayFeedback {
            gain: s(-40.0),
            delays: DelayDistribution::point(1).unwrap(),
        };
        let d = LoopDesign::new(plant, noise, cost, wm, &SolverOptions::default()).unwrap();
        let err = run_nominal(&d, &SimulationConfig::new(5_000, 1)).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
    }

    #[test]
    fn ensemble_is_ordered_and_reproducible() {
        let d = scalar_design(delay_wm(0.2, 3));
        let cfg = SimulationConfig::new(200, 11);
        let job = |_: usize, c: &SimulationConfig| Ok(run_nominal(&d, c)?.records.last().unwrap().x[0]);
        let a = run_ensemble(&cfg, 8, job).unwrap();
        let b = run_ensemble(&cfg, 8, job).unwrap();
        assert_eq!(a, b);
        let single = run_nominal(&d, &cfg).unwrap().records.last().unwrap().x[0];
        assert_eq!(run_ensemble(&cfg, 1, job).unwrap(), vec![single]);
        assert_eq!(a[0], single);
        assert!(run_ensemble(&cfg, 0, job).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let d = scalar_design(delay_wm(0.2, 3));
        let trace = run_nominal(&d, &SimulationConfig::new(5, 1)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x[0],xhat[0],xupd[0],u[0],y[0],y_obs[0],tau,attack_active");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 9);
        assert_eq!(text.lines().count(), 6);
        assert_eq!(format_float(0.1), "1.0000000000000001e-1");
    }
}
