//! Experiment configuration files.
//!
//! A config is a TOML document of flat keys grouped in sections:
//!
//! ```toml
//! kind = "optimize"
//! seed = 7
//! output = "runs/b1"
//!
//! [model]
//! benchmark = "B1"
//! sigma = [1.0]
//!
//! [mc]
//! steps = 512
//! paths = 10000
//! ```
//!
//! Everything except `kind`, `seed`, `model.benchmark` and `model.sigma` has a
//! default; the resolved config (defaults filled in) is what gets hashed and
//! written to the run manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::RegressionBasis;
use crate::benchmarks::{BenchmarkId, BenchmarkParams};
use crate::error::{IsmpError, Result};
use crate::sde::{McSetup, SigmaVector, TimeGrid, Window};
use crate::smp::{ConcavityProbe, OptimizerConfig, StepSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Simulate,
    Localtime,
    Flow,
    Adjoint,
    Optimize,
    Verify,
    Study,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub adjoint: AdjointSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub localtime: LocaltimeSection,
    #[serde(default)]
    pub study: StudySection,
}

fn default_output() -> PathBuf {
    PathBuf::from("ismp-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub benchmark: BenchmarkId,
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub x0: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "defaults::c")]
    pub c: f64,
    #[serde(default = "defaults::theta")]
    pub theta: f64,
    #[serde(default = "defaults::steepness")]
    pub steepness: f64,
    #[serde(default = "defaults::control_lo")]
    pub control_lo: f64,
    #[serde(default = "defaults::control_hi")]
    pub control_hi: f64,
    #[serde(default = "defaults::moment_bound")]
    pub moment_bound: f64,
}

fn one() -> f64 {
    1.0
}

mod defaults {
    use crate::benchmarks::BenchmarkParams;

    pub fn c() -> f64 {
        BenchmarkParams::default().c
    }
    pub fn theta() -> f64 {
        BenchmarkParams::default().theta
    }
    pub fn steepness() -> f64 {
        BenchmarkParams::default().steepness
    }
    pub fn control_lo() -> f64 {
        BenchmarkParams::default().control_lo
    }
    pub fn control_hi() -> f64 {
        BenchmarkParams::default().control_hi
    }
    pub fn moment_bound() -> f64 {
        BenchmarkParams::default().moment_bound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub steps: usize,
    pub paths: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            steps: 512,
            paths: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    /// `value` at every step.
    Constant,
    /// Closed-form optimum of the benchmark (B1).
    Analytic,
    /// Closed-form optimum shifted by `perturbation`.
    AnalyticPerturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub kind: ControlKind,
    pub value: Vec<f64>,
    pub perturbation: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            kind: ControlKind::Constant,
            value: vec![0.0],
            perturbation: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub iterations: usize,
    pub rho0: f64,
    pub decay: f64,
    pub stop_tol: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let s = StepSchedule::default();
        Self {
            iterations: 200,
            rho0: s.rho0,
            decay: s.decay,
            stop_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Smooth,
    Localtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdjointSection {
    pub degree: usize,
    pub ridge: f64,
    pub engine: EngineKind,
    /// Mollification level of `b1`; 0 keeps the exact drift.
    pub level: u32,
    /// Adds `|x - x0|` and `1{x > 0}` features.
    pub irregular_features: bool,
}

impl Default for AdjointSection {
    fn default() -> Self {
        let b = RegressionBasis::default();
        Self {
            degree: b.degree,
            ridge: b.ridge,
            engine: EngineKind::Smooth,
            level: 0,
            irregular_features: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub floor: f64,
    pub concavity_samples: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            floor: crate::smp::TOLERANCE_FLOOR,
            concavity_samples: ConcavityProbe::default().samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub start: f64,
    /// Defaults to the horizon.
    pub end: Option<f64>,
    pub bump: f64,
    /// Mollification level used for the smooth-exp estimator on irregular drifts.
    pub level: u32,
    /// Largest accepted pairwise relative RMS discrepancy.
    pub tolerance: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            start: 0.0,
            end: None,
            bump: 1e-4,
            level: 64,
            tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocaltimeSection {
    pub level: f64,
    pub calibration_paths: usize,
    pub calibration_steps: usize,
}

impl Default for LocaltimeSection {
    fn default() -> Self {
        Self {
            level: 0.0,
            calibration_paths: 2000,
            calibration_steps: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub levels: Vec<u32>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            levels: vec![4, 16, 64],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| IsmpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            IsmpError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            IsmpError::Config(msg) => IsmpError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(IsmpError::Config(format!("key '{key}': {why}")));
        if self.model.sigma.is_empty() || self.model.sigma.iter().all(|&s| s == 0.0) {
            return bad("model.sigma", "must be a non-zero vector");
        }
        if !(self.model.horizon > 0.0) {
            return bad("model.horizon", "must be positive");
        }
        if !(self.model.control_lo <= self.model.control_hi) {
            return bad("model.control_lo", "must not exceed model.control_hi");
        }
        if self.mc.steps < 2 {
            return bad("mc.steps", "must be at least 2");
        }
        if self.mc.paths == 0 {
            return bad("mc.paths", "must be positive");
        }
        if self.control.value.len() != 1 {
            return bad("control.value", "benchmarks have a scalar control");
        }
        if self.study.levels.is_empty() || self.study.levels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("study.levels", "must be non-empty and increasing");
        }
        if self.study.levels.contains(&0) {
            return bad("study.levels", "levels start at 1");
        }
        if !(self.flow.bump > 0.0) {
            return bad("flow.bump", "must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved config. Object keys
    /// are emitted in sorted order, so the hash ignores key order in the file.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let canonical = value.to_string();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn params(&self) -> BenchmarkParams {
        BenchmarkParams {
            c: self.model.c,
            theta: self.model.theta,
            steepness: self.model.steepness,
            control_lo: self.model.control_lo,
            control_hi: self.model.control_hi,
            moment_bound: self.model.moment_bound,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.model.horizon, self.mc.steps)
    }

    pub fn setup(&self) -> Result<McSetup> {
        Ok(McSetup {
            grid: self.grid()?,
            sigma: SigmaVector::new(self.model.sigma.clone())?,
            x0: self.model.x0,
            num_paths: self.mc.paths,
            seed: self.seed,
        })
    }

    pub fn basis(&self) -> RegressionBasis {
        let mut b = if self.adjoint.irregular_features {
            RegressionBasis::irregular(self.adjoint.degree, self.model.x0, 0.0)
        } else {
            RegressionBasis::polynomial(self.adjoint.degree)
        };
        b.ridge = self.adjoint.ridge;
        b
    }

    pub fn flow_window(&self) -> Result<Window> {
        let grid = self.grid()?;
        Window::from_times(&grid, self.flow.start, self.flow.end.unwrap_or(self.model.horizon))
    }

    pub fn optimizer_schedule(&self) -> OptimizerConfig {
        OptimizerConfig {
            iterations: self.optimizer.iterations,
            schedule: StepSchedule {
                rho0: self.optimizer.rho0,
                decay: self.optimizer.decay,
            },
            stop_tol: self.optimizer.stop_tol,
            basis: self.basis(),
            ..OptimizerConfig::default()
        }
    }
}
