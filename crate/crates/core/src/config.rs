//! TOML experiment configuration.
//!
//! Matrices take one of three forms:
//!
//! ```toml
//! a = { rows = 2, cols = 2, data = [0.9, 0.1, 0.0, 0.8] }  # row-major
//! q = { diag = [1.0, 2.0] }
//! r = { scale = 1.0 }  # scale times I, or scale times [I; 0] when not square
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::{calibrate_threshold, default_burn_in, DetectorConfig};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SolverOptions};
use crate::sim::{AttackScenario, ReplayMode, RngSpec, SimulationConfig};
use crate::synthesis::{stacked_identity, DelayDistribution, LoopDesign, LqgCost, LtiPlant, NoiseModel, Watermark};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum MatrixSpec {
    Full { rows: usize, cols: usize, data: Vec<f64> },
    Diag { diag: Vec<f64> },
    Scaled { scale: f64 },
}

impl MatrixSpec {
    pub fn full(m: &Matrix) -> Self {
        MatrixSpec::Full {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }

    /// Resolves against the expected shape; `None` accepts any shape for
    /// explicit forms.
    pub fn resolve(&self, field: &str, shape: Option<(usize, usize)>) -> Result<Matrix> {
        let m = match self {
            MatrixSpec::Full { rows, cols, data } => {
                if data.len() != rows * cols {
                    return Err(Error::invalid(field, format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len())));
                }
                Matrix::from_row_slice(*rows, *cols, data)
            }
            MatrixSpec::Diag { diag } => Matrix::from_diagonal(&crate::linalg::Vector::from_column_slice(diag)),
            MatrixSpec::Scaled { scale } => {
                let (r, c) = shape.ok_or_else(|| Error::invalid(field, "a scaled identity needs known dimensions"))?;
                stacked_identity(r, c, *scale)
            }
        };
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(field, "entries must be finite"));
        }
        if let Some((r, c)) = shape {
            if m.shape() != (r, c) {
                return Err(Error::invalid(field, format!("expected {r}x{c}, got {}x{}", m.nrows(), m.ncols())));
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    pub c: MatrixSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<MatrixSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma_w: MatrixSpec,
    pub sigma_v: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub q: MatrixSpec,
    pub r: MatrixSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WatermarkVariant {
    None,
    Delay,
    Gaussian,
}

impl WatermarkVariant {
    pub const ALL: [WatermarkVariant; 3] = [WatermarkVariant::None, WatermarkVariant::Gaussian, WatermarkVariant::Delay];

    pub fn label(self) -> &'static str {
        match self {
            WatermarkVariant::None => "none",
            WatermarkVariant::Delay => "delay",
            WatermarkVariant::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkSection {
    pub variant: WatermarkVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_tau: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_min: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_max: Option<usize>,
    /// Explicit delay pmf over `1..=len`; overrides `tau_min`/`tau_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pmf: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_gw: Option<MatrixSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub false_alarm_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    pub seed: u64,
    #[serde(default = "one")]
    pub n_runs: usize,
    /// Length of the long runs behind empirical costs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_horizon: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Recorded,
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<usize>,
    pub t_prime: usize,
    pub mode: AttackMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default)]
    pub norm: crate::stability::MatrixNorm,
    #[serde(default)]
    pub convention: crate::covariance::MomentConvention,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_lyap: Option<MatrixSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub plant: PlantSection,
    pub noise: NoiseSection,
    pub cost: CostSection,
    pub watermark: WatermarkSection,
    pub detector: DetectorSection,
    pub sim: SimSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every field that can be checked without solving Riccati
    /// equations.
    pub fn validate(&self) -> Result<()> {
        let plant = self.plant()?;
        self.noise(&plant)?;
        self.cost(&plant)?;
        self.watermark(&plant, self.watermark.variant)?;
        if self.detector.window == 0 {
            return Err(Error::invalid("detector.window", "must be at least 1"));
        }
        if self.detector.psi.is_some() && self.detector.false_alarm_rate.is_some() {
            return Err(Error::invalid("detector", "give either psi or false_alarm_rate, not both"));
        }
        if self.sim.horizon == 0 {
            return Err(Error::invalid("sim.horizon", "must be positive"));
        }
        if self.sim.n_runs == 0 {
            return Err(Error::invalid("sim.n_runs", "must be at least 1"));
        }
        if let Some(a) = &self.attack {
            self.scenario_from(a)?.validate()?;
        }
        Ok(())
    }

    pub fn plant(&self) -> Result<LtiPlant> {
        let a = self.plant.a.resolve("plant.a", None)?;
        let n = a.nrows();
        // a scaled identity for B or C is square
        let square = |spec: &MatrixSpec| matches!(spec, MatrixSpec::Scaled { .. }).then_some((n, n));
        let b = self.plant.b.resolve("plant.b", square(&self.plant.b))?;
        let c = self.plant.c.resolve("plant.c", square(&self.plant.c))?;
        if b.nrows() != n {
            return Err(Error::invalid("plant.b", format!("must have {n} rows")));
        }
        if c.ncols() != n {
            return Err(Error::invalid("plant.c", format!("must have {n} columns")));
        }
        match &self.plant.d {
            Some(d) => {
                let d = d.resolve("plant.d", square(d))?;
                LtiPlant::with_noise_input(a, b, c, d)
            }
            None => LtiPlant::new(a, b, c),
        }
    }

    pub fn noise(&self, plant: &LtiPlant) -> Result<NoiseModel> {
        let (n_w, n_y) = (plant.n_w(), plant.n_y());
        NoiseModel::new(
            self.noise.sigma_w.resolve("noise.sigma_w", Some((n_w, n_w)))?,
            self.noise.sigma_v.resolve("noise.sigma_v", Some((n_y, n_y)))?,
        )
    }

    pub fn cost(&self, plant: &LtiPlant) -> Result<LqgCost> {
        let (n_x, n_u) = (plant.n_x(), plant.n_u());
        LqgCost::new(self.cost.q.resolve("cost.q", Some((n_x, n_x)))?, self.cost.r.resolve("cost.r", Some((n_u, n_u)))?)
    }

    pub fn delays(&self) -> Result<DelayDistribution> {
        let w = &self.watermark;
        match (&w.pmf, w.tau_min, w.tau_max) {
            (Some(pmf), _, _) => DelayDistribution::new(pmf.clone()),
            (None, Some(lo), Some(hi)) => DelayDistribution::uniform(lo, hi),
            (None, None, Some(hi)) => DelayDistribution::uniform(1, hi),
            _ => Err(Error::invalid("watermark.tau_max", "delay watermark needs tau_max or pmf")),
        }
    }

    /// The watermark of `variant`, using this file's parameters for it.
    pub fn watermark(&self, plant: &LtiPlant, variant: WatermarkVariant) -> Result<Watermark> {
        let w = &self.watermark;
        let wm = match variant {
            WatermarkVariant::None => Watermark::None,
            WatermarkVariant::Delay => {
                let spec = w.k_tau.as_ref().ok_or_else(|| Error::invalid("watermark.k_tau", "required for the delay variant"))?;
                Watermark::DelayFeedback {
                    gain: spec.resolve("watermark.k_tau", Some((plant.n_u(), plant.n_x())))?,
                    delays: self.delays()?,
                }
            }
            WatermarkVariant::Gaussian => {
                let spec = w
                    .sigma_gw
                    .as_ref()
                    .ok_or_else(|| Error::invalid("watermark.sigma_gw", "required for the gaussian variant"))?;
                Watermark::GaussianAdditive {
                    covariance: spec.resolve("watermark.sigma_gw", Some((plant.n_u(), plant.n_u())))?,
                }
            }
        };
        wm.validate(plant)?;
        Ok(wm)
    }

    pub fn design(&self) -> Result<LoopDesign> {
        self.design_for(self.watermark.variant)
    }

    pub fn design_for(&self, variant: WatermarkVariant) -> Result<LoopDesign> {
        let plant = self.plant()?;
        let noise = self.noise(&plant)?;
        let cost = self.cost(&plant)?;
        let wm = self.watermark(&plant, variant)?;
        LoopDesign::new(plant, noise, cost, wm, &SolverOptions::default())
    }

    pub fn c_lyap(&self, n: usize) -> Result<Matrix> {
        match &self.analysis.c_lyap {
            Some(spec) => spec.resolve("analysis.c_lyap", Some((n, n))),
            None => Ok(Matrix::identity(n, n)),
        }
    }

    pub fn detector(&self, n_y: usize) -> Result<DetectorConfig> {
        let psi = match (self.detector.psi, self.detector.false_alarm_rate) {
            (Some(psi), _) => psi,
            (None, rate) => calibrate_threshold(self.detector.window, n_y, rate.unwrap_or(0.01))?,
        };
        DetectorConfig::new(self.detector.window, psi)
    }

    pub fn burn_in(&self) -> Result<usize> {
        if let Some(b) = self.sim.burn_in {
            return Ok(b);
        }
        let max_delay = match self.watermark.variant {
            WatermarkVariant::Delay => self.delays()?.max_delay(),
            _ => 0,
        };
        Ok(default_burn_in(max_delay))
    }

    fn scenario_from(&self, a: &AttackSection) -> Result<AttackScenario> {
        Ok(match a.mode {
            AttackMode::Virtual => AttackScenario::virtual_system(a.t_prime),
            AttackMode::Recorded => {
                let (Some(s), Some(e)) = (a.t_start, a.t_end) else {
                    return Err(Error::invalid("attack", "recorded mode needs t_start and t_end"));
                };
                AttackScenario {
                    attack_start: a.t_prime,
                    mode: ReplayMode::Recorded { record_start: s, record_end: e },
                }
            }
        })
    }

    pub fn scenario(&self) -> Result<Option<AttackScenario>> {
        self.attack.as_ref().map(|a| self.scenario_from(a)).transpose()
    }

    /// Simulation settings for the main horizon, with an optional seed
    /// override.
    pub fn simulation(&self, seed: Option<u64>) -> Result<SimulationConfig> {
        Ok(SimulationConfig {
            horizon: self.sim.horizon,
            rng: RngSpec::new(seed.unwrap_or(self.sim.seed)),
            scenario: self.scenario()?,
            initial: None,
            noise_scale: 1.0,
        })
    }

    /// Plant and settings of the worked three-tank example. Noise and
    /// watermark intensities are standard deviations: `Σ_W = 0.5² I`,
    /// `Σ_V = 0.1² I`, `Σ_GW = 0.015² I`.
    pub fn three_tank() -> Self {
        let full = |rows, cols, data: &[f64]| MatrixSpec::Full {
            rows,
            cols,
            data: data.to_vec(),
        };
        ExperimentConfig {
            name: Some("three-tank".into()),
            plant: PlantSection {
                a: full(3, 3, &[0.96, 0.0, 0.0, 0.04, 0.97, 0.0, -0.04, 0.0, 0.9]),
                b: full(3, 4, &[8.8, -2.3, 0.0, 0.0, 0.2, 2.2, 4.9, 0.0, -0.21, -2.2, 1.9, 21.0]),
                c: MatrixSpec::Scaled { scale: 1.0 },
                d: None,
            },
            noise: NoiseSection {
                sigma_w: MatrixSpec::Scaled { scale: 0.25 },
                sigma_v: MatrixSpec::Scaled { scale: 0.01 },
            },
            cost: CostSection {
                q: MatrixSpec::Diag { diag: vec![0.3, 0.3, 2.4] },
                r: MatrixSpec::Scaled { scale: 1.0 },
            },
            watermark: WatermarkSection {
                variant: WatermarkVariant::Delay,
                k_tau: Some(MatrixSpec::Scaled { scale: 0.0713 }),
                tau_min: Some(50),
                tau_max: Some(200),
                pmf: None,
                sigma_gw: Some(MatrixSpec::Scaled { scale: 0.000225 }),
            },
            detector: DetectorSection {
                window: 85,
                psi: None,
                false_alarm_rate: Some(0.01),
            },
            sim: SimSection {
                horizon: 10_000,
                burn_in: None,
                seed: 20_240_601,
                n_runs: 200,
                cost_horizon: Some(1_000_000),
            },
            attack: Some(AttackSection {
                t_start: Some(6000),
                t_end: Some(6300),
                t_prime: 6500,
                mode: AttackMode::Recorded,
            }),
            analysis: AnalysisSection::default(),
        }
    }

    /// Scalar loop small enough for the exact attacked covariance:
    /// `x⁺ = 0.9x + u + w`, `y = x + v`, delays uniform on `{1, 2}`.
    pub fn scalar_attack() -> Self {
        let one = MatrixSpec::Scaled { scale: 1.0 };
        ExperimentConfig {
            name: Some("scalar-attack".into()),
            plant: PlantSection {
                a: MatrixSpec::Full {
                    rows: 1,
                    cols: 1,
                    data: vec![0.9],
                },
                b: one.clone(),
                c: one.clone(),
                d: None,
            },
            noise: NoiseSection {
                sigma_w: MatrixSpec::Scaled { scale: 0.3 },
                sigma_v: MatrixSpec::Scaled { scale: 0.1 },
            },
            cost: CostSection { q: one.clone(), r: one },
            watermark: WatermarkSection {
                variant: WatermarkVariant::Delay,
                k_tau: Some(MatrixSpec::Scaled { scale: 0.4 }),
                tau_min: Some(1),
                tau_max: Some(2),
                pmf: None,
                sigma_gw: Some(MatrixSpec::Scaled { scale: 0.05 }),
            },
            detector: DetectorSection {
                window: 10,
                psi: None,
                false_alarm_rate: Some(0.01),
            },
            sim: SimSection {
                horizon: 1000,
                burn_in: None,
                seed: 7,
                n_runs: 5000,
                cost_horizon: Some(1_000_000),
            },
            attack: Some(AttackSection {
                t_start: None,
                t_end: None,
                t_prime: 0,
                mode: AttackMode::Virtual,
            }),
            analysis: AnalysisSection::default(),
        }
    }

    /// The three-tank example with the intensities read as covariances.
    pub fn three_tank_literal_noise() -> Self {
        let mut cfg = Self::three_tank();
        cfg.name = Some("three-tank-literal-noise".into());
        cfg.noise.sigma_w = MatrixSpec::Scaled { scale: 0.5 };
        cfg.noise.sigma_v = MatrixSpec::Scaled { scale: 0.1 };
        cfg.watermark.sigma_gw = Some(MatrixSpec::Scaled { scale: 0.015 });
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[plant]
a = { rows = 1, cols = 1, data = [0.9] }
b = { scale = 1.0 }
c = { scale = 1.0 }

[noise]
sigma_w = { scale = 0.3 }
sigma_v = { scale = 0.1 }

[cost]
q = { diag = [1.0] }
r = { scale = 1.0 }

[watermark]
variant = "delay"
k_tau = { scale = 0.4 }
tau_max = 2

[detector]
window = 10

[sim]
horizon = 500
seed = 3
"#;

    #[test]
    fn small_config_parses() {
        let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
        let d = cfg.design().unwrap();
        assert_eq!(d.plant.n_x(), 1);
        assert_eq!(d.watermark.delays().unwrap().max_delay(), 2);
        assert_eq!(cfg.sim.n_runs, 1);
        assert_eq!(cfg.burn_in().unwrap(), 1000);
        assert!(cfg.scenario().unwrap().is_none());
        let det = cfg.detector(1).unwrap();
        assert_eq!(det.window, 10);
        assert!(det.threshold > 11.0);
    }

    #[test]
    fn round_trip() {
        for cfg in [ExperimentConfig::three_tank(), ExperimentConfig::from_toml_str(SMALL).unwrap()] {
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn three_tank_resolves() {
        let cfg = ExperimentConfig::three_tank();
        let d = cfg.design().unwrap();
        assert_eq!((d.plant.n_x(), d.plant.n_u(), d.plant.n_y()), (3, 4, 3));
        let k = d.delay_gain();
        assert_eq!(k[(0, 0)], 0.0713);
        assert_eq!(k.row(3).amax(), 0.0);
        assert_eq!(d.noise.sigma_w[(1, 1)], 0.25);
        assert_eq!(cfg.burn_in().unwrap(), 2000);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = SMALL.replace("b = { scale = 1.0 }", "b = { rows = 2, cols = 1, data = [1.0, 2.0] }");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("plant.b"), "{err}");
        let bad = SMALL.replace("data = [0.9]", "data = [0.9, 1.0]");
        assert!(ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string().contains("plant.a"));
        let bad = SMALL.replace("window = 10", "window = 10\nbogus = 1");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line"), "{err}");
        let bad = SMALL.replace("tau_max = 2", "");
        assert!(ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string().contains("tau_max"));
        let bad = SMALL.replace("window = 10", "window = 10\npsi = 3.0\nfalse_alarm_rate = 0.1");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }
}
