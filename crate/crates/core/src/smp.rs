//! Maximum-principle verifiers, projected-gradient optimisation and
//! mollification studies.
//!
//! Problems are posed as maximisation of
//! `J(a) = E[sum f(t_j, X_j, a_j) dt + g(X_N)]`. The variational inequality
//! is checked in the form `E[d_a H (a_hat - b)] >= 0` for every probe `b` in
//! the admissible box, which at an interior optimum reduces to `d_a H = 0` and
//! at an active bound to the sign condition of a clipped maximiser.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_flow_lsmc, grad_a_hamiltonian, hamiltonian, AdjointEstimate, CostSpec, RegressionBasis};
use crate::error::{IsmpError, Result};
use crate::flow::{FlowEngine, FlowEstimator};
use crate::localtime::Calibration;
use crate::rng::stream_rng;
use crate::sde::{
    control_distance, ControlMode, ControlSpec, DriftLevel, DriftSpec, McSetup, PathEnsemble,
    StateDrift, TimeGrid,
};
use crate::stats::mean_and_se;

/// Absolute floor added to `3 SE` in statistical comparisons.
pub const TOLERANCE_FLOOR: f64 = 1e-3;

/// Monte Carlo estimate of `J`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ValueEstimate {
    pub value: f64,
    /// Zero for deterministic payoffs.
    pub se: f64,
    pub level: DriftLevel,
}

/// `sum_j f(t_j, X_j, a_j) dt + g(X_N)` per path.
pub fn path_values(ensemble: &PathEnsemble, cost: &CostSpec) -> Vec<f64> {
    let grid = *ensemble.grid();
    let n = grid.steps();
    (0..ensemble.num_paths())
        .into_par_iter()
        .map(|p| {
            let xs = ensemble.path(p);
            let running: f64 = (0..n)
                .map(|k| (cost.f)(grid.time(k), xs[k], ensemble.control(p, k)))
                .sum();
            running * grid.dt() + (cost.g)(xs[n])
        })
        .collect()
}

pub fn value_of(ensemble: &PathEnsemble, cost: &CostSpec) -> Result<ValueEstimate> {
    let v = path_values(ensemble, cost);
    let (value, se) = mean_and_se(&v);
    if !value.is_finite() {
        return Err(IsmpError::InvalidArgument("non-finite value estimate".into()));
    }
    Ok(ValueEstimate {
        value,
        se,
        level: ensemble.level(),
    })
}

pub fn estimate_value(
    drift: &DriftSpec,
    control: &ControlSpec,
    cost: &CostSpec,
    setup: &McSetup,
) -> Result<ValueEstimate> {
    value_of(&setup.simulate(drift, control)?, cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    Necessary,
    Sufficient,
}

/// Outcome of a maximum-principle verifier.
#[derive(Debug, Clone, Serialize)]
pub struct SmpReport {
    pub condition: Condition,
    /// Necessary: smallest `E[d_a H (a_hat - b)]` over steps and probes.
    /// Sufficient: largest `|E[d_a H]|` component over steps.
    pub worst_violation: f64,
    /// Per step, the slack `est + 3 SE + floor` (necessary, must be `>= 0`)
    /// or `3 SE + floor - |est|` (sufficient, must be `>= 0`).
    pub profile: Vec<f64>,
    /// Per step, the raw statistic behind `profile`.
    pub statistic: Vec<f64>,
    pub se: Vec<f64>,
    pub floor: f64,
    pub passed: bool,
}

impl SmpReport {
    pub fn worst_margin(&self) -> f64 {
        self.profile.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn check_shapes(ensemble: &PathEnsemble, adjoint: &AdjointEstimate) -> Result<()> {
    if adjoint.steps() != ensemble.steps() || adjoint.num_paths() != ensemble.num_paths() {
        return Err(IsmpError::GridMismatch(
            "adjoint and ensemble have different shapes".into(),
        ));
    }
    Ok(())
}

/// `d_a H(t_k, X_k, Y_k, a_k)` for every path at step `k`, row-major `M x m`.
fn hamiltonian_gradients(
    ensemble: &PathEnsemble,
    adjoint: &AdjointEstimate,
    drift: &DriftSpec,
    cost: &CostSpec,
    k: usize,
) -> Vec<f64> {
    let m = ensemble.control_dim();
    let t = ensemble.grid().time(k);
    let mut out = vec![0.0; ensemble.num_paths() * m];
    out.par_chunks_mut(m).enumerate().for_each(|(p, g)| {
        grad_a_hamiltonian(
            t,
            ensemble.state(p, k),
            adjoint.y(p, k),
            ensemble.control(p, k),
            drift,
            cost,
            g,
        );
    });
    out
}

/// Checks `E[d_a H (a_hat - b)] >= -(3 SE + floor)` at every step for every
/// probe `b`.
pub fn verify_necessary(
    ensemble: &PathEnsemble,
    adjoint: &AdjointEstimate,
    drift: &DriftSpec,
    cost: &CostSpec,
    probes: &[Vec<f64>],
    floor: f64,
) -> Result<SmpReport> {
    if probes.is_empty() {
        return Err(IsmpError::InvalidArgument("empty probe set".into()));
    }
    check_shapes(ensemble, adjoint)?;
    let m = ensemble.control_dim();
    if probes.iter().any(|b| b.len() != m) {
        return Err(IsmpError::InvalidArgument(format!("probes must have dimension {m}")));
    }
    let n = ensemble.steps();
    let num = ensemble.num_paths();
    let rows: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let grads = hamiltonian_gradients(ensemble, adjoint, drift, cost, k);
            let mut worst = (f64::INFINITY, 0.0, f64::INFINITY);
            let mut vals = vec![0.0; num];
            for b in probes {
                for (p, v) in vals.iter_mut().enumerate() {
                    let a = ensemble.control(p, k);
                    *v = (0..m).map(|i| grads[p * m + i] * (a[i] - b[i])).sum();
                }
                let (est, se) = mean_and_se(&vals);
                let margin = est + 3.0 * se + floor;
                if margin < worst.2 {
                    worst = (est, se, margin);
                }
            }
            worst
        })
        .collect();
    let worst_violation = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let profile: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let passed = profile.iter().all(|&v| v >= 0.0);
    Ok(SmpReport {
        condition: Condition::Necessary,
        worst_violation,
        statistic: rows.iter().map(|r| r.0).collect(),
        se: rows.iter().map(|r| r.1).collect(),
        profile,
        floor,
        passed,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConcavityProbe {
    pub samples: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ConcavityProbe {
    fn default() -> Self {
        Self {
            samples: 500,
            tol: 1e-9,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcavityReport {
    pub samples: usize,
    /// Most negative `H(mid) - (H1 + H2) / 2` seen (scaled tolerance applied).
    pub worst_gap_h: f64,
    pub worst_gap_g: f64,
    pub g_declared_concave: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SufficientOutcome {
    Pass,
    StationarityFailed,
    HypothesesUnmet,
}

#[derive(Debug, Clone, Serialize)]
pub struct SufficientReport {
    pub stationarity: SmpReport,
    pub concavity: ConcavityReport,
    pub outcome: SufficientOutcome,
}

/// Midpoint-concavity probes of `H(t, ., y, .)` in `(x, a)` and of `g`, at
/// states and adjoint values sampled from the ensemble.
pub fn concavity_probe(
    ensemble: &PathEnsemble,
    adjoint: &AdjointEstimate,
    drift: &DriftSpec,
    cost: &CostSpec,
    bounds: &crate::sde::ControlBox,
    config: &ConcavityProbe,
) -> ConcavityReport {
    let mut rng = stream_rng(config.seed, u64::MAX - 2);
    let n = ensemble.steps();
    let num = ensemble.num_paths();
    let m = bounds.dim();
    let (mut worst_h, mut worst_g) = (f64::INFINITY, f64::INFINITY);
    let mut a1 = vec![0.0; m];
    let mut a2 = vec![0.0; m];
    let mut mid = vec![0.0; m];
    for _ in 0..config.samples {
        let k = rng.gen_range(0..n);
        let (p1, p2) = (rng.gen_range(0..num), rng.gen_range(0..num));
        let t = ensemble.grid().time(k);
        let (x1, x2) = (ensemble.state(p1, k), ensemble.state(p2, k));
        let y = adjoint.y(p1, k);
        for i in 0..m {
            let (lo, hi) = (bounds.lo()[i], bounds.hi()[i]);
            a1[i] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            a2[i] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            mid[i] = 0.5 * (a1[i] + a2[i]);
        }
        let h1 = hamiltonian(t, x1, y, &a1, drift, cost);
        let h2 = hamiltonian(t, x2, y, &a2, drift, cost);
        let hm = hamiltonian(t, 0.5 * (x1 + x2), y, &mid, drift, cost);
        let scale = 1.0 + h1.abs() + h2.abs();
        worst_h = worst_h.min((hm - 0.5 * (h1 + h2)) / scale);
        let (g1, g2) = ((cost.g)(x1), (cost.g)(x2));
        let gm = (cost.g)(0.5 * (x1 + x2));
        worst_g = worst_g.min((gm - 0.5 * (g1 + g2)) / (1.0 + g1.abs() + g2.abs()));
    }
    let passed = cost.g_concave && worst_h >= -config.tol && worst_g >= -config.tol;
    ConcavityReport {
        samples: config.samples,
        worst_gap_h: worst_h,
        worst_gap_g: worst_g,
        g_declared_concave: cost.g_concave,
        passed,
    }
}

/// Stationarity `|E[d_a H(t_k)]| <= 3 SE + floor` at every step plus the
/// concavity hypotheses.
#[allow(clippy::too_many_arguments)]
pub fn verify_sufficient(
    ensemble: &PathEnsemble,
    adjoint: &AdjointEstimate,
    drift: &DriftSpec,
    cost: &CostSpec,
    bounds: &crate::sde::ControlBox,
    probe: &ConcavityProbe,
    floor: f64,
) -> Result<SufficientReport> {
    check_shapes(ensemble, adjoint)?;
    let m = ensemble.control_dim();
    let num = ensemble.num_paths();
    let rows: Vec<(f64, f64, f64)> = (0..ensemble.steps())
        .into_par_iter()
        .map(|k| {
            let grads = hamiltonian_gradients(ensemble, adjoint, drift, cost, k);
            let mut worst = (0.0, 0.0, f64::INFINITY);
            for i in 0..m {
                let col: Vec<f64> = (0..num).map(|p| grads[p * m + i]).collect();
                let (est, se) = mean_and_se(&col);
                let margin = 3.0 * se + floor - est.abs();
                if margin < worst.2 {
                    worst = (est.abs(), se, margin);
                }
            }
            worst
        })
        .collect();
    let profile: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let stationarity = SmpReport {
        condition: Condition::Sufficient,
        worst_violation: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        statistic: rows.iter().map(|r| r.0).collect(),
        se: rows.iter().map(|r| r.1).collect(),
        passed: profile.iter().all(|&v| v >= 0.0),
        profile,
        floor,
    };
    let concavity = concavity_probe(ensemble, adjoint, drift, cost, bounds, probe);
    let outcome = if !concavity.passed {
        SufficientOutcome::HypothesesUnmet
    } else if !stationarity.passed {
        SufficientOutcome::StationarityFailed
    } else {
        SufficientOutcome::Pass
    };
    Ok(SufficientReport {
        stationarity,
        concavity,
        outcome,
    })
}

/// `rho_i = rho0 / (1 + i / decay)`
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepSchedule {
    pub rho0: f64,
    pub decay: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            rho0: 0.5,
            decay: 50.0,
        }
    }
}

impl StepSchedule {
    pub fn rho(&self, i: usize) -> f64 {
        self.rho0 / (1.0 + i as f64 / self.decay)
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub schedule: StepSchedule,
    /// Stop once `sup |a_{i+1} - a_i|` falls below this.
    pub stop_tol: f64,
    pub basis: RegressionBasis,
    pub engine: FlowEngine,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            schedule: StepSchedule::default(),
            stop_tol: 1e-10,
            basis: RegressionBasis::default(),
            engine: FlowEngine::SmoothExp,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub value: f64,
    pub se: f64,
    /// `sup_k |E[d_a H(t_k)]|` at this iterate.
    pub gradient_sup: f64,
    /// `sup |a_{i+1} - a_i|` of the update taken from this iterate.
    pub step_sup: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OptimizerStatus {
    Converged,
    IterationLimit,
    Diverged { iteration: usize },
}

#[derive(Clone)]
pub struct OptimizationResult {
    pub control: ControlSpec,
    pub trace: Vec<TraceEntry>,
    pub status: OptimizerStatus,
}

/// Path-averaged `d_a H` on the control lattice, `N x m`.
pub fn mean_hamiltonian_gradient(
    ensemble: &PathEnsemble,
    adjoint: &AdjointEstimate,
    drift: &DriftSpec,
    cost: &CostSpec,
) -> Vec<f64> {
    let m = ensemble.control_dim();
    let num = ensemble.num_paths() as f64;
    (0..ensemble.steps())
        .into_par_iter()
        .flat_map_iter(|k| {
            let g = hamiltonian_gradients(ensemble, adjoint, drift, cost, k);
            (0..m).map(move |i| g.iter().skip(i).step_by(m).sum::<f64>() / num)
        })
        .collect()
}

/// Projected gradient ascent `a <- Proj(a + rho_i E[d_a H])` on one fixed
/// noise sample.
pub fn optimize_control(
    initial: &ControlSpec,
    setup: &McSetup,
    drift: &DriftSpec,
    cost: &CostSpec,
    config: &OptimizerConfig,
) -> Result<OptimizationResult> {
    if initial.mode() != ControlMode::OpenLoop {
        return Err(IsmpError::InvalidArgument(
            "the optimiser works on open-loop lattice controls".into(),
        ));
    }
    initial.check_grid(&setup.grid)?;
    let noise = setup.noise();
    let mut control = initial.clone();
    let mut trace = Vec::with_capacity(config.iterations);
    for i in 0..config.iterations {
        let ens = setup.simulate_on(drift, &control, &noise)?;
        let value = value_of(&ens, cost);
        let value = match value {
            Ok(v) => v,
            Err(_) => {
                return Ok(OptimizationResult {
                    control,
                    trace,
                    status: OptimizerStatus::Diverged { iteration: i },
                })
            }
        };
        let adj = adjoint_flow_lsmc(&ens, &config.engine, drift, cost, &config.basis)?;
        let grad = mean_hamiltonian_gradient(&ens, &adj, drift, cost);
        let next = control.stepped(&grad, config.schedule.rho(i))?;
        let step_sup = match (control.lattice(), next.lattice()) {
            (Some(a), Some(b)) => a.iter().zip(b).fold(0.0, |s: f64, (x, y)| s.max((x - y).abs())),
            _ => 0.0,
        };
        trace.push(TraceEntry {
            iteration: i,
            value: value.value,
            se: value.se,
            gradient_sup: grad.iter().fold(0.0, |s: f64, g| s.max(g.abs())),
            step_sup,
        });
        control = next;
        if step_sup <= config.stop_tol {
            return Ok(OptimizationResult {
                control,
                trace,
                status: OptimizerStatus::Converged,
            });
        }
    }
    Ok(OptimizationResult {
        control,
        trace,
        status: OptimizerStatus::IterationLimit,
    })
}

/// Reference against which the mollified path gap is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathReference {
    /// Euler scheme with the unmollified drift.
    Exact,
    /// Euler scheme with the given mollification level.
    Level(u32),
}

/// Per-level entries of a mollification study.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    pub levels: Vec<u32>,
    /// `max_k E|X_n^{a1}(t_k) - X_ref^{a2}(t_k)|`
    pub path_gap: Vec<f64>,
    pub path_gap_se: Vec<f64>,
    /// Gaussian-weighted `int int |b1n - b1|^4` integral.
    pub bound_integral: Vec<f64>,
    /// Square root of `bound_integral`, the drift part of the path-gap bound.
    pub bound_term: Vec<f64>,
    pub bound_finite: Vec<bool>,
    pub delta: f64,
}

const BOUND_TIME_NODES: usize = 128;

/// `int_0^T (2 pi s)^{-1/2} e^{|x0|^2 / 2s} int |b1n - b1|^4(s, sigma y) e^{-y^2/4s} dy ds`
///
/// With `y = 2 sqrt(s) v` the inner integral becomes `sqrt(2/pi) int h e^{-v^2} dv`
/// (before the `e^{|x0|^2/2s}` factor), integrated on `v in [-6, 6]` with a
/// spacing that resolves the kernel radius `1/n` in the state variable. The
/// time integral uses `s = T r^2`. For `x0 != 0` the weight blows up at
/// `s -> 0` and the result is reported as non-finite.
pub fn drift_difference_integral(
    b1: &dyn StateDrift,
    b1n: &dyn StateDrift,
    level: u32,
    sigma_norm: f64,
    x0: f64,
    horizon: f64,
) -> f64 {
    let dr = 1.0 / BOUND_TIME_NODES as f64;
    let half = 6.0;
    // collected before summing so the total does not depend on the pool size
    let slices: Vec<f64> = (0..BOUND_TIME_NODES)
        .into_par_iter()
        .map(|i| {
            let r = (i as f64 + 0.5) * dr;
            let s = horizon * r * r;
            let weight = (x0 * x0 / (2.0 * s)).exp();
            // state-space extent 2 half sigma 2 sqrt(s), spacing <= 1/(8n)
            let extent = 2.0 * half * sigma_norm * 2.0 * s.sqrt();
            let nodes = ((extent * 8.0 * level as f64).ceil() as usize).clamp(64, 40_000);
            let dv = 2.0 * half / nodes as f64;
            let inner: f64 = (0..nodes)
                .map(|j| {
                    let v = -half + (j as f64 + 0.5) * dv;
                    let z = sigma_norm * 2.0 * s.sqrt() * v;
                    let d = b1n.value(s, z) - b1.value(s, z);
                    d.powi(4) * (-v * v).exp()
                })
                .sum::<f64>()
                * dv;
            (2.0 / std::f64::consts::PI).sqrt() * weight * inner * 2.0 * horizon * r * dr
        })
        .collect();
    slices.iter().sum()
}

fn sup_mean_abs_gap(a: &PathEnsemble, b: &PathEnsemble) -> (f64, f64) {
    let n = a.steps();
    let m = a.num_paths();
    (1..=n)
        .into_par_iter()
        .map(|k| {
            let d: Vec<f64> = (0..m).map(|p| (a.state(p, k) - b.state(p, k)).abs()).collect();
            mean_and_se(&d)
        })
        .reduce(|| (0.0, 0.0), |x, y| if y.0 > x.0 { y } else { x })
}

/// Path gap and bound term per mollification level, on common noise.
pub fn mollified_convergence_study(
    setup: &McSetup,
    drift: &DriftSpec,
    alpha1: &ControlSpec,
    alpha2: &ControlSpec,
    levels: &[u32],
    reference: PathReference,
) -> Result<ConvergenceStudy> {
    check_levels(levels)?;
    let noise = setup.noise();
    let ref_drift = match reference {
        PathReference::Exact => drift.clone(),
        PathReference::Level(n) => drift.mollified(n)?,
    };
    let reference_paths = setup.simulate_on(&ref_drift, alpha2, &noise)?;
    let delta = control_distance(alpha1, alpha2, &setup.grid, None)?;
    let mut study = ConvergenceStudy {
        levels: levels.to_vec(),
        path_gap: Vec::new(),
        path_gap_se: Vec::new(),
        bound_integral: Vec::new(),
        bound_term: Vec::new(),
        bound_finite: Vec::new(),
        delta,
    };
    for &n in levels {
        let dn = drift.mollified(n)?;
        let ens = setup.simulate_on(&dn, alpha1, &noise)?;
        let (gap, se) = sup_mean_abs_gap(&ens, &reference_paths);
        let integral = drift_difference_integral(
            drift.b1.as_ref(),
            dn.b1.as_ref(),
            n,
            setup.sigma.norm(),
            setup.x0,
            setup.grid.horizon(),
        );
        study.path_gap.push(gap);
        study.path_gap_se.push(se);
        study.bound_finite.push(integral.is_finite());
        study.bound_integral.push(integral);
        study.bound_term.push(integral.sqrt());
    }
    Ok(study)
}

fn check_levels(levels: &[u32]) -> Result<()> {
    if levels.is_empty() || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(IsmpError::InvalidArgument("levels must be non-empty and increasing".into()));
    }
    Ok(())
}

/// `J_n(a) - J(a)` per level from paired paths.
#[derive(Debug, Clone, Serialize)]
pub struct CostGapStudy {
    pub levels: Vec<u32>,
    /// `|mean(J_n - J)|`
    pub gap: Vec<f64>,
    /// SE of the paired difference.
    pub se: Vec<f64>,
    pub reference: ValueEstimate,
}

pub fn cost_convergence_study(
    setup: &McSetup,
    drift: &DriftSpec,
    control: &ControlSpec,
    cost: &CostSpec,
    levels: &[u32],
) -> Result<CostGapStudy> {
    check_levels(levels)?;
    let noise = setup.noise();
    let exact = setup.simulate_on(drift, control, &noise)?;
    let base = path_values(&exact, cost);
    let (value, se) = mean_and_se(&base);
    let mut study = CostGapStudy {
        levels: levels.to_vec(),
        gap: Vec::new(),
        se: Vec::new(),
        reference: ValueEstimate {
            value,
            se,
            level: DriftLevel::Exact,
        },
    };
    for &n in levels {
        let ens = setup.simulate_on(&drift.mollified(n)?, control, &noise)?;
        let diff: Vec<f64> = path_values(&ens, cost)
            .iter()
            .zip(&base)
            .map(|(a, b)| a - b)
            .collect();
        let (m, s) = mean_and_se(&diff);
        study.gap.push(m.abs());
        study.se.push(s);
    }
    Ok(study)
}

/// `E|Y_n(t_k) - Y_ref(t_k)|` per level, averaged over the grid, where
/// `Y_ref` uses the local-time flow of the exact drift.
#[derive(Debug, Clone, Serialize)]
pub struct AdjointGapStudy {
    pub levels: Vec<u32>,
    pub mean_abs_gap: Vec<f64>,
    pub reference: FlowEstimator,
}

#[allow(clippy::too_many_arguments)]
pub fn adjoint_convergence_study(
    setup: &McSetup,
    drift: &DriftSpec,
    control: &ControlSpec,
    cost: &CostSpec,
    levels: &[u32],
    calibration: &Calibration,
    basis: &RegressionBasis,
) -> Result<AdjointGapStudy> {
    check_levels(levels)?;
    let noise = setup.noise();
    let exact = setup.simulate_on(drift, control, &noise)?;
    let reference = adjoint_flow_lsmc(
        &exact,
        &FlowEngine::LocalTimeRep(calibration.clone()),
        drift,
        cost,
        basis,
    )?;
    let n_steps = setup.grid.steps();
    let mut gaps = Vec::new();
    for &n in levels {
        let dn = drift.mollified(n)?;
        let ens = setup.simulate_on(&dn, control, &noise)?;
        let adj = adjoint_flow_lsmc(&ens, &FlowEngine::SmoothExp, &dn, cost, basis)?;
        let per_path: Vec<f64> = (0..ens.num_paths())
            .into_par_iter()
            .map(|p| {
                (0..=n_steps)
                    .map(|k| (adj.y(p, k) - reference.y(p, k)).abs())
                    .sum::<f64>()
            })
            .collect();
        let total: f64 = per_path.iter().sum();
        gaps.push(total / (ens.num_paths() * (n_steps + 1)) as f64);
    }
    Ok(AdjointGapStudy {
        levels: levels.to_vec(),
        mean_abs_gap: gaps,
        reference: FlowEstimator::LocalTimeRep,
    })
}

/// Analytic (variational-process) and finite-difference directional
/// derivatives of `J`.
#[derive(Debug, Clone, Serialize)]
pub struct GateauxReport {
    pub analytic: f64,
    pub analytic_se: f64,
    /// `(eps, mean FD quotient, SE)`
    pub finite_differences: Vec<(f64, f64, f64)>,
    /// `2 FD(eps/2) - FD(eps)` at the first `eps`.
    pub richardson: f64,
    /// Paired mean and SE of `richardson - analytic` per path.
    pub difference: f64,
    pub difference_se: f64,
    /// `3 SE + eps` allowance.
    pub tolerance: f64,
    pub agrees: bool,
}

/// Per-path `sum (f_x V + f_a . eta) dt + g'(X_N) V_N`, with
/// `V_{k+1} = V_k + (b_x V_k + b_a . eta_k) dt`, `V_0 = 0`.
fn variational_derivative(
    ensemble: &PathEnsemble,
    drift: &DriftSpec,
    cost: &CostSpec,
    direction: &[f64],
) -> Result<Vec<f64>> {
    let grid = *ensemble.grid();
    let n = grid.steps();
    let m = ensemble.control_dim();
    let dt = grid.dt();
    (0..ensemble.num_paths())
        .into_par_iter()
        .map(|p| {
            let xs = ensemble.path(p);
            let mut v = 0.0;
            let mut acc = 0.0;
            let mut fa = vec![0.0; m];
            let mut ba = vec![0.0; m];
            for k in 0..n {
                let t = grid.time(k);
                let a = ensemble.control(p, k);
                let eta = &direction[k * m..(k + 1) * m];
                (cost.dfda)(t, xs[k], a, &mut fa);
                (drift.b2.dfda)(t, xs[k], a, &mut ba);
                let fa_eta: f64 = fa.iter().zip(eta).map(|(x, y)| x * y).sum();
                let ba_eta: f64 = ba.iter().zip(eta).map(|(x, y)| x * y).sum();
                acc += ((cost.dfdx)(t, xs[k], a) * v + fa_eta) * dt;
                v += (drift.dx(t, xs[k], a)? * v + ba_eta) * dt;
            }
            Ok(acc + (cost.dgdx)(xs[n]) * v)
        })
        .collect()
}

/// Compares the variational derivative of `J_n` in direction `eta` with
/// paired finite differences at each `eps` and their Richardson pairing.
pub fn gateaux_check(
    setup: &McSetup,
    drift: &DriftSpec,
    control: &ControlSpec,
    direction: &[f64],
    eps: &[f64],
    cost: &CostSpec,
) -> Result<GateauxReport> {
    if eps.is_empty() || eps.iter().any(|&e| !(e > 0.0)) {
        return Err(IsmpError::InvalidArgument("eps list must be positive and non-empty".into()));
    }
    let noise = setup.noise();
    let base = setup.simulate_on(drift, control, &noise)?;
    let base_values = path_values(&base, cost);
    let analytic_paths = variational_derivative(&base, drift, cost, direction)?;
    let (analytic, analytic_se) = mean_and_se(&analytic_paths);
    let quotient = |e: f64| -> Result<Vec<f64>> {
        let bumped = control.perturbed(direction, e)?;
        let ens = setup.simulate_on(drift, &bumped, &noise)?;
        Ok(path_values(&ens, cost)
            .iter()
            .zip(&base_values)
            .map(|(a, b)| (a - b) / e)
            .collect())
    };
    let mut finite_differences = Vec::new();
    for &e in eps {
        let q = quotient(e)?;
        let (m, s) = mean_and_se(&q);
        finite_differences.push((e, m, s));
    }
    let e0 = eps[0];
    let coarse = quotient(e0)?;
    let fine = quotient(0.5 * e0)?;
    let rich: Vec<f64> = fine.iter().zip(&coarse).map(|(f, c)| 2.0 * f - c).collect();
    let (richardson, _) = mean_and_se(&rich);
    let diff: Vec<f64> = rich.iter().zip(&analytic_paths).map(|(r, a)| r - a).collect();
    let (difference, difference_se) = mean_and_se(&diff);
    let tolerance = 3.0 * difference_se + e0;
    Ok(GateauxReport {
        analytic,
        analytic_se,
        finite_differences,
        richardson,
        difference,
        difference_se,
        tolerance,
        agrees: difference.abs() <= tolerance,
    })
}

/// Informational comparison of successive near-optimisers against the
/// `sqrt(2 eps_n)` radius.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EkelandReport {
    pub radius: f64,
    pub distance: f64,
    pub within: bool,
}

pub fn ekeland_diagnostic(
    current: &ControlSpec,
    next: &ControlSpec,
    eps_n: f64,
    grid: &TimeGrid,
) -> Result<EkelandReport> {
    if !(eps_n >= 0.0) {
        return Err(IsmpError::InvalidArgument(format!("eps_n = {eps_n} must be >= 0")));
    }
    let radius = (2.0 * eps_n).sqrt();
    let distance = control_distance(current, next, grid, None)?;
    Ok(EkelandReport {
        radius,
        distance,
        within: distance <= radius,
    })
}
