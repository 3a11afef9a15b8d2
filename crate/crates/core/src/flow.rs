//! First-variation flow `Phi(t, s) = d X^x(s) / d x` of the state process.
//!
//! Three estimators:
//!
//! * [`flow_smooth_exp`]: `exp(sum d_x b dt)`, needs a differentiable drift;
//! * [`flow_finite_difference`]: pathwise bump of the state at `t`, same noise;
//! * [`flow_localtime_rep`]: `exp(-|sigma|^{-2} int int b1 L^X + sum d_x b2 dt)`,
//!   which only evaluates `b1` and so applies to discontinuous drifts.
//!
//! Every exponential estimator is a product of per-step factors; [`FlowEngine`]
//! exposes them to the backward adjoint sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IsmpError, Result};
use crate::localtime::{reversal_step_terms, Calibration, Integrand};
use crate::sde::{ControlSpec, DriftLevel, DriftSpec, McSetup, PathEnsemble, Window};
use crate::stats::{mean_and_se, rms, rms_diff};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowEstimator {
    SmoothExp,
    FiniteDifference,
    LocalTimeRep,
}

impl FlowEstimator {
    pub fn name(self) -> &'static str {
        match self {
            FlowEstimator::SmoothExp => "smooth-exp",
            FlowEstimator::FiniteDifference => "finite-diff",
            FlowEstimator::LocalTimeRep => "localtime-rep",
        }
    }
}

/// Per-path `Phi(t, s)` over `window = [t, s]`.
#[derive(Debug, Clone)]
pub struct FlowEstimate {
    pub window: Window,
    pub values: Vec<f64>,
    pub estimator: FlowEstimator,
    pub provenance: DriftLevel,
    /// Paths with `Phi <= 0` (finite differences only).
    pub positivity_violations: usize,
}

impl FlowEstimate {
    pub fn mean_and_se(&self) -> (f64, f64) {
        mean_and_se(&self.values)
    }

    pub fn rms(&self) -> f64 {
        rms(&self.values)
    }

    pub fn second_moment(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64
    }
}

/// `RMS(a - b)` relative to the mean of the two RMS magnitudes.
pub fn relative_discrepancy(a: &FlowEstimate, b: &FlowEstimate) -> f64 {
    let scale = 0.5 * (a.rms() + b.rms());
    rms_diff(&a.values, &b.values) / scale
}

/// Source of per-step log flow factors.
#[derive(Debug, Clone)]
pub enum FlowEngine {
    SmoothExp,
    LocalTimeRep(Calibration),
}

impl FlowEngine {
    pub fn estimator(&self) -> FlowEstimator {
        match self {
            FlowEngine::SmoothExp => FlowEstimator::SmoothExp,
            FlowEngine::LocalTimeRep(_) => FlowEstimator::LocalTimeRep,
        }
    }

    /// Writes `log Phi(t_k, t_{k+1})` of path `p` into `out[k]`, `k` in `window`.
    pub(crate) fn log_increments(
        &self,
        drift: &DriftSpec,
        ensemble: &PathEnsemble,
        p: usize,
        window: Window,
        out: &mut [f64],
    ) -> Result<()> {
        let grid = ensemble.grid();
        let dt = grid.dt();
        let xs = ensemble.path(p);
        match self {
            FlowEngine::SmoothExp => {
                for k in window.start..window.end {
                    out[k] = drift.dx(grid.time(k), xs[k], ensemble.control(p, k))? * dt;
                }
            }
            FlowEngine::LocalTimeRep(cal) => {
                let f = Integrand::from_drift("b1", drift.b1.clone());
                reversal_step_terms(&f, ensemble, p, window, cal.signs, out);
                let coeff = -1.0 / ensemble.sigma().norm_sq();
                for k in window.start..window.end {
                    let b2x = (drift.b2.dfdx)(grid.time(k), xs[k], ensemble.control(p, k));
                    out[k] = coeff * out[k] + b2x * dt;
                }
            }
        }
        Ok(())
    }

    /// Per-path flow over `window` from the summed log factors.
    pub fn estimate(
        &self,
        drift: &DriftSpec,
        ensemble: &PathEnsemble,
        window: Window,
    ) -> Result<FlowEstimate> {
        let window = window.validated(ensemble.grid())?;
        let n = ensemble.steps();
        let values = (0..ensemble.num_paths())
            .into_par_iter()
            .map(|p| {
                let mut buf = vec![0.0; n];
                self.log_increments(drift, ensemble, p, window, &mut buf)?;
                let v = buf[window.start..window.end].iter().sum::<f64>().exp();
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(IsmpError::InvalidArgument(format!(
                        "flow overflow on path {p}"
                    )))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(FlowEstimate {
            window,
            values,
            estimator: self.estimator(),
            provenance: drift.level(),
            positivity_violations: 0,
        })
    }
}

/// `exp(sum_{j in window} (d_x b1 + d_x b2)(t_j, X_j, a_j) dt)` per path.
pub fn flow_smooth_exp(
    drift: &DriftSpec,
    ensemble: &PathEnsemble,
    window: Window,
) -> Result<FlowEstimate> {
    if !drift.b1.has_derivative() {
        return Err(IsmpError::MissingDerivative(
            "smooth-exp flow needs d/dx b1; mollify the drift or use the local-time estimator"
                .into(),
        ));
    }
    FlowEngine::SmoothExp.estimate(drift, ensemble, window)
}

/// Local-time representation with the calibrated signs.
pub fn flow_localtime_rep(
    drift: &DriftSpec,
    ensemble: &PathEnsemble,
    calibration: Option<&Calibration>,
    window: Window,
) -> Result<FlowEstimate> {
    let cal = calibration.ok_or(IsmpError::Uncalibrated)?;
    FlowEngine::LocalTimeRep(cal.clone()).estimate(drift, ensemble, window)
}

/// Default bump `1e-4 * max(1, |x0|)`.
pub fn default_bump(x0: f64) -> f64 {
    1e-4 * x0.abs().max(1.0)
}

/// `(X^{X_t + h}(s) - X^{X_t}(s)) / h` per path on the ensemble's own noise.
///
/// The bumped path is carried as the gap `D = X^{x+h} - X^x`, which avoids
/// cancellation and returns exactly 1 whenever the drift ignores the state.
pub fn flow_finite_difference(
    drift: &DriftSpec,
    control: &ControlSpec,
    ensemble: &PathEnsemble,
    window: Window,
    h: f64,
) -> Result<FlowEstimate> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(IsmpError::InvalidArgument(format!("bump h = {h} must be positive")));
    }
    if h < 10.0 * f64::EPSILON * ensemble.x0().abs() {
        return Err(IsmpError::InvalidArgument(format!(
            "bump h = {h} is below 10 eps |x0| = {}",
            10.0 * f64::EPSILON * ensemble.x0().abs()
        )));
    }
    let window = window.validated(ensemble.grid())?;
    control.check_grid(ensemble.grid())?;
    let grid = *ensemble.grid();
    let dt = grid.dt();
    let m = control.dim();
    let values = (0..ensemble.num_paths())
        .into_par_iter()
        .map(|p| {
            let xs = ensemble.path(p);
            let mut a = vec![0.0; m];
            let mut gap = h;
            for k in window.start..window.end {
                let t = grid.time(k);
                let x = xs[k];
                let y = x + gap;
                let bx = drift.eval_checked(t, x, ensemble.control(p, k))?;
                control.eval(k, t, y, &mut a)?;
                let by = drift.eval_checked(t, y, &a)?;
                gap += (by - bx) * dt;
            }
            Ok(gap / h)
        })
        .collect::<Result<Vec<f64>>>()?;
    let positivity_violations = values.iter().filter(|&&v| v <= 0.0).count();
    Ok(FlowEstimate {
        window,
        values,
        estimator: FlowEstimator::FiniteDifference,
        provenance: drift.level(),
        positivity_violations,
    })
}

/// Richardson pairing `2 Phi(h/2) - Phi(h)`.
pub fn flow_finite_difference_richardson(
    drift: &DriftSpec,
    control: &ControlSpec,
    ensemble: &PathEnsemble,
    window: Window,
    h: f64,
) -> Result<FlowEstimate> {
    let coarse = flow_finite_difference(drift, control, ensemble, window, h)?;
    let mut fine = flow_finite_difference(drift, control, ensemble, window, 0.5 * h)?;
    for (f, c) in fine.values.iter_mut().zip(&coarse.values) {
        *f = 2.0 * *f - c;
    }
    fine.positivity_violations = fine.values.iter().filter(|&&v| v <= 0.0).count();
    Ok(fine)
}

/// `E|Phi_n - Phi_ref|^2` per mollification level.
#[derive(Debug, Clone, Serialize)]
pub struct FlowConvergenceTable {
    pub levels: Vec<u32>,
    pub mse: Vec<f64>,
    pub se: Vec<f64>,
    pub reference: FlowEstimator,
}

/// Compares the smooth-exp flow of the level-`n` mollified problem driven by
/// `controls[i]` with the local-time flow of the exact problem under
/// `reference_control`, all on the same noise.
pub fn flow_convergence_study(
    setup: &McSetup,
    drift: &DriftSpec,
    levels: &[u32],
    controls: &[ControlSpec],
    reference_control: &ControlSpec,
    calibration: &Calibration,
    window: Window,
) -> Result<FlowConvergenceTable> {
    if levels.len() != controls.len() {
        return Err(IsmpError::InvalidArgument(format!(
            "{} levels but {} controls",
            levels.len(),
            controls.len()
        )));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(IsmpError::InvalidArgument("levels must increase".into()));
    }
    let noise = setup.noise();
    let exact = setup.simulate_on(drift, reference_control, &noise)?;
    let reference = flow_localtime_rep(drift, &exact, Some(calibration), window)?;
    let mut mse = Vec::with_capacity(levels.len());
    let mut se = Vec::with_capacity(levels.len());
    for (&n, control) in levels.iter().zip(controls) {
        let dn = drift.mollified(n)?;
        let ens = setup.simulate_on(&dn, control, &noise)?;
        let phi = flow_smooth_exp(&dn, &ens, window)?;
        let sq: Vec<f64> = phi
            .values
            .iter()
            .zip(&reference.values)
            .map(|(a, b)| (a - b) * (a - b))
            .collect();
        let (m, s) = mean_and_se(&sq);
        mse.push(m);
        se.push(s);
    }
    Ok(FlowConvergenceTable {
        levels: levels.to_vec(),
        mse,
        se,
        reference: FlowEstimator::LocalTimeRep,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::localtime::SignScale;
    use crate::sde::{
        simulate_paths, ControlBox, ControlledDrift, FnStateDrift, SigmaVector, TimeGrid,
    };

    fn control(g: &TimeGrid, a: f64) -> ControlSpec {
        ControlSpec::constant(g, ControlBox::interval(-1.0, 1.0).unwrap(), 10.0, &[a]).unwrap()
    }

    fn calibration() -> Calibration {
        Calibration {
            signs: SignScale { sigma_sign: 1.0, kappa_sign: 1.0 },
            mismatch: 0.0,
            separation: f64::INFINITY,
            table: Vec::new(),
            norm_sq: 1.0,
        }
    }

    fn run(drift: &DriftSpec, n: usize, m: usize, a: f64, seed: u64) -> (PathEnsemble, ControlSpec) {
        let g = TimeGrid::new(1.0, n).unwrap();
        let c = control(&g, a);
        let e = simulate_paths(drift, &SigmaVector::scalar(1.0).unwrap(), &c, &g, 0.1, m, seed)
            .unwrap();
        (e, c)
    }

    #[test]
    fn state_free_drift_gives_unit_flow() {
        let drift = DriftSpec::new(
            Arc::new(FnStateDrift::constant(0.3)),
            ControlledDrift::additive_control(1.0),
        );
        let (e, c) = run(&drift, 64, 50, 0.2, 1);
        let w = e.grid().full_window();
        let cal = calibration();
        for est in [
            flow_smooth_exp(&drift, &e, w).unwrap(),
            flow_finite_difference(&drift, &c, &e, w, 1e-4).unwrap(),
            flow_localtime_rep(&drift, &e, Some(&cal), w).unwrap(),
        ] {
            assert!(est.values.iter().all(|&v| v == 1.0), "{:?}", est.estimator);
        }
    }

    #[test]
    fn empty_window_is_identity() {
        let drift = DriftSpec::new(Arc::new(FnStateDrift::sine(1.0)), ControlledDrift::zero());
        let (e, c) = run(&drift, 32, 20, 0.0, 2);
        let w = Window::new(10, 10);
        let cal = calibration();
        assert!(flow_smooth_exp(&drift, &e, w).unwrap().values.iter().all(|&v| v == 1.0));
        assert!(flow_finite_difference(&drift, &c, &e, w, 1e-4)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 1.0));
        assert!(flow_localtime_rep(&drift, &e, Some(&cal), w)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn linear_drift_flow() {
        let kappa = -0.7;
        let drift = DriftSpec::new(
            Arc::new(FnStateDrift::zero()),
            ControlledDrift::linear_state(kappa, 100.0),
        );
        let (e, c) = run(&drift, 1000, 20, 0.0, 3);
        let w = Window::new(200, 900);
        let exact = (kappa * 0.7f64).exp();
        let s = flow_smooth_exp(&drift, &e, w).unwrap();
        assert!(s.values.iter().all(|&v| (v - exact).abs() < 1e-12 * exact));
        for h in [1e-3, 1e-4] {
            let fd = flow_finite_difference(&drift, &c, &e, w, h).unwrap();
            let rich = flow_finite_difference_richardson(&drift, &c, &e, w, h).unwrap();
            for (a, b) in fd.values.iter().zip(&rich.values) {
                assert!((a - exact).abs() < 1e-3 * exact);
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn smooth_flow_is_multiplicative() {
        let drift = DriftSpec::new(Arc::new(FnStateDrift::sine(1.0)), ControlledDrift::zero());
        let (e, _) = run(&drift, 256, 100, 0.0, 4);
        let tu = flow_smooth_exp(&drift, &e, Window::new(10, 200)).unwrap();
        let ts = flow_smooth_exp(&drift, &e, Window::new(10, 90)).unwrap();
        let su = flow_smooth_exp(&drift, &e, Window::new(90, 200)).unwrap();
        for p in 0..100 {
            let prod = ts.values[p] * su.values[p];
            assert!((tu.values[p] - prod).abs() <= 1e-13 * prod);
            assert!(tu.values[p] > 0.0);
        }
    }

    #[test]
    fn sine_drift_smooth_matches_finite_difference() {
        let drift = DriftSpec::new(Arc::new(FnStateDrift::sine(1.0)), ControlledDrift::zero());
        let (e, c) = run(&drift, 4096, 400, 0.0, 5);
        let w = e.grid().full_window();
        let s = flow_smooth_exp(&drift, &e, w).unwrap();
        let fd = flow_finite_difference(&drift, &c, &e, w, 1e-4).unwrap();
        assert!(relative_discrepancy(&s, &fd) < 0.02);
        assert_eq!(fd.positivity_violations, 0);
    }

    #[test]
    fn localtime_rep_tracks_smooth_flow() {
        let drift = DriftSpec::new(Arc::new(FnStateDrift::sine(1.0)), ControlledDrift::zero());
        let (e, _) = run(&drift, 4096, 400, 0.0, 6);
        let w = e.grid().full_window();
        let s = flow_smooth_exp(&drift, &e, w).unwrap();
        let lt = flow_localtime_rep(&drift, &e, Some(&calibration()), w).unwrap();
        let d = relative_discrepancy(&s, &lt);
        assert!(d < 0.05, "{d}");
    }

    #[test]
    fn localtime_rep_requires_calibration() {
        let drift = DriftSpec::new(Arc::new(FnStateDrift::sine(1.0)), ControlledDrift::zero());
        let (e, _) = run(&drift, 16, 4, 0.0, 7);
        let r = flow_localtime_rep(&drift, &e, None, e.grid().full_window());
        assert!(matches!(r, Err(IsmpError::Uncalibrated)));
    }

    #[test]
    fn bump_must_be_resolvable() {
        let drift = DriftSpec::zero();
        let g = TimeGrid::new(1.0, 8).unwrap();
        let c = control(&g, 0.0);
        let e = simulate_paths(&drift, &SigmaVector::scalar(1.0).unwrap(), &c, &g, 1e6, 2, 1)
            .unwrap();
        let w = g.full_window();
        assert!(flow_finite_difference(&drift, &c, &e, w, 0.0).is_err());
        assert!(flow_finite_difference(&drift, &c, &e, w, 1e-12).is_err());
        assert!(flow_finite_difference(&drift, &c, &e, w, 1e-3).is_ok());
    }

    #[test]
    fn discontinuous_drift_needs_derivative_for_smooth_exp() {
        let drift = DriftSpec::new(Arc::new(FnStateDrift::step(0.5)), ControlledDrift::zero());
        let (e, _) = run(&drift, 16, 4, 0.0, 8);
        assert!(matches!(
            flow_smooth_exp(&drift, &e, e.grid().full_window()),
            Err(IsmpError::MissingDerivative(_))
        ));
    }
}
