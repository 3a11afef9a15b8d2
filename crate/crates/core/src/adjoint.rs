//! Hamiltonian, adjoint process by least-squares Monte Carlo, and the
//! residual of the linear adjoint BSDE.
//!
//! The adjoint at `t_k` is the conditional expectation of the payload
//!
//! ```text
//! P_k = Phi(t_k, T) g'(X_T) + sum_{j >= k} Phi(t_k, t_j) f_x(t_j, X_j, a_j) dt
//! ```
//!
//! which obeys `P_N = g'(X_N)`, `P_k = f_x dt + phi_k P_{k+1}` with the
//! one-step flow `phi_k`. `E[P_k | X_k]` is fitted by ridge regression on a
//! polynomial basis in `X_k`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IsmpError, Result};
use crate::flow::{FlowEngine, FlowEstimator};
use crate::rng::stream_rng;
use crate::sde::{ControlGradFn, ControlledFn, DriftSpec, PathEnsemble};
use crate::stats::mean_and_se;

pub type TerminalFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Running cost `f(t, x, a)` and bequest `g(x)` with their derivatives.
#[derive(Clone)]
pub struct CostSpec {
    pub f: ControlledFn,
    pub dfdx: ControlledFn,
    pub dfda: ControlGradFn,
    pub g: TerminalFn,
    pub dgdx: TerminalFn,
    /// `C` in `|f| + |g| <= C (1 + |x|)` on the admissible box.
    pub growth: f64,
    /// Declared concavity of `g` (checked by the sufficiency verifier).
    pub g_concave: bool,
}

impl CostSpec {
    /// `f = c x - |a|^2 / 2`, `g = x`.
    pub fn linear_bequest(c: f64, control_bound: f64) -> Self {
        Self {
            f: Arc::new(move |_, x, a| c * x - 0.5 * a.iter().map(|v| v * v).sum::<f64>()),
            dfdx: Arc::new(move |_, _, _| c),
            dfda: Arc::new(|_, _, a, out| {
                for (o, v) in out.iter_mut().zip(a) {
                    *o = -v;
                }
            }),
            g: Arc::new(|x| x),
            dgdx: Arc::new(|_| 1.0),
            growth: 1.0 + c.abs() + 0.5 * control_bound * control_bound,
            g_concave: true,
        }
    }

    /// Flips the sign of the control penalty: `f = c x + |a|^2 / 2`.
    pub fn convex_in_control(c: f64, control_bound: f64) -> Self {
        let mut s = Self::linear_bequest(c, control_bound);
        s.f = Arc::new(move |_, x, a| c * x + 0.5 * a.iter().map(|v| v * v).sum::<f64>());
        s.dfda = Arc::new(|_, _, a, out| out.copy_from_slice(a));
        s
    }

    /// `lambda (f, g)`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let (f, fx, fa, g, gx) = (
            self.f.clone(),
            self.dfdx.clone(),
            self.dfda.clone(),
            self.g.clone(),
            self.dgdx.clone(),
        );
        Self {
            f: Arc::new(move |t, x, a| lambda * f(t, x, a)),
            dfdx: Arc::new(move |t, x, a| lambda * fx(t, x, a)),
            dfda: Arc::new(move |t, x, a, out| {
                fa(t, x, a, out);
                out.iter_mut().for_each(|v| *v *= lambda);
            }),
            g: Arc::new(move |x| lambda * g(x)),
            dgdx: Arc::new(move |x| lambda * gx(x)),
            growth: lambda.abs() * self.growth,
            g_concave: if lambda >= 0.0 { self.g_concave } else { false },
        }
    }

    /// Central-difference check of the derivative callbacks and of the growth
    /// bound at random points with `a` in `[lo, hi]^m`.
    pub fn check(&self, lo: &[f64], hi: &[f64], samples: usize, rel_tol: f64, seed: u64) -> Result<()> {
        let m = lo.len();
        let mut rng = stream_rng(seed, u64::MAX - 1);
        let mut a = vec![0.0; m];
        let mut grad = vec![0.0; m];
        for _ in 0..samples {
            let t: f64 = rng.gen_range(0.0..1.0);
            let x: f64 = rng.gen_range(-5.0..5.0);
            for i in 0..m {
                a[i] = if hi[i] > lo[i] { rng.gen_range(lo[i]..hi[i]) } else { lo[i] };
            }
            let h = 1e-5 * x.abs().max(1.0);
            let fx = ((self.f)(t, x + h, &a) - (self.f)(t, x - h, &a)) / (2.0 * h);
            crate::sde::compare("df/dx", (self.dfdx)(t, x, &a), fx, rel_tol)?;
            let gx = ((self.g)(x + h) - (self.g)(x - h)) / (2.0 * h);
            crate::sde::compare("dg/dx", (self.dgdx)(x), gx, rel_tol)?;
            (self.dfda)(t, x, &a, &mut grad);
            for i in 0..m {
                let ha = 1e-5 * a[i].abs().max(1.0);
                let mut up = a.clone();
                let mut dn = a.clone();
                up[i] += ha;
                dn[i] -= ha;
                let fa = ((self.f)(t, x, &up) - (self.f)(t, x, &dn)) / (2.0 * ha);
                crate::sde::compare("df/da", grad[i], fa, rel_tol)?;
            }
            let size = (self.f)(t, x, &a).abs() + (self.g)(x).abs();
            if size > self.growth * (1.0 + x.abs()) * (1.0 + 1e-12) {
                return Err(IsmpError::ContractViolation(format!(
                    "|f| + |g| = {size} exceeds C (1 + |x|) at x = {x}"
                )));
            }
        }
        Ok(())
    }
}

/// `H = f + (b1 + b2) y`
pub fn hamiltonian(t: f64, x: f64, y: f64, a: &[f64], drift: &DriftSpec, cost: &CostSpec) -> f64 {
    let b = drift.b1.value(t, x) + (drift.b2.f)(t, x, a);
    (cost.f)(t, x, a) + b * y
}

/// `d_a H = d_a f + d_a b2 y`, written to `out`.
pub fn grad_a_hamiltonian(
    t: f64,
    x: f64,
    y: f64,
    a: &[f64],
    drift: &DriftSpec,
    cost: &CostSpec,
    out: &mut [f64],
) {
    let mut db = vec![0.0; out.len()];
    (cost.dfda)(t, x, a, out);
    (drift.b2.dfda)(t, x, a, &mut db);
    for (o, d) in out.iter_mut().zip(&db) {
        *o += d * y;
    }
}

/// Features for the conditional-expectation fit: `1, u, ..., u^degree` in the
/// standardised state `u`, plus the optional `|x - kink|` and `1{x > step}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    pub kink: Option<f64>,
    pub step: Option<f64>,
    /// Ridge weight relative to `trace(G) / p`; the intercept is not penalised.
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 4,
            kink: None,
            step: None,
            ridge: 1e-8,
        }
    }
}

/// Largest accepted condition number of the regularised Gram matrix.
pub const MAX_CONDITION: f64 = 1e13;

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            degree,
            ..Self::default()
        }
    }

    /// Polynomial basis augmented with `|x - x0|` and `1{x > kappa}`.
    pub fn irregular(degree: usize, x0: f64, kappa: f64) -> Self {
        Self {
            degree,
            kink: Some(x0),
            step: Some(kappa),
            ridge: 1e-8,
        }
    }

    pub fn num_features(&self) -> usize {
        1 + self.degree + self.kink.is_some() as usize + self.step.is_some() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(IsmpError::InvalidArgument(format!("ridge {} must be >= 0", self.ridge)));
        }
        Ok(())
    }

    fn features(&self, x: f64, center: f64, scale: f64, out: &mut [f64]) {
        let u = (x - center) / scale;
        let mut pow = 1.0;
        for o in out.iter_mut().take(self.degree + 1) {
            *o = pow;
            pow *= u;
        }
        let mut i = self.degree + 1;
        if let Some(k) = self.kink {
            out[i] = (x - k).abs() / scale;
            i += 1;
        }
        if let Some(s) = self.step {
            out[i] = if x > s { 1.0 } else { 0.0 };
        }
    }
}

struct Fit {
    fitted: Vec<f64>,
    se: f64,
    condition: f64,
}

/// Ridge least squares of `y - mean(y)` on the basis evaluated at `x`.
fn fit_step(basis: &RegressionBasis, step: usize, x: &[f64], y: &[f64]) -> Result<Fit> {
    let m = x.len();
    let (mean, var) = {
        let mu = x.iter().sum::<f64>() / m as f64;
        let v = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
        (mu, v)
    };
    let (y_mean, _) = mean_and_se(y);
    let spread = y.iter().map(|v| (v - y_mean).abs()).fold(0.0, f64::max);
    // round-off in the backward payload sums
    let floor = 4.0 * f64::EPSILON * y_mean.abs().max(spread) * (m as f64).log2().max(1.0);
    if var.sqrt() <= 1e-12 * (1.0 + mean.abs()) {
        let res = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>();
        let sd = if m > 1 { (res / (m - 1) as f64).sqrt() } else { 0.0 };
        return Ok(Fit {
            fitted: vec![y_mean; m],
            se: sd / (m as f64).sqrt() + floor,
            condition: 1.0,
        });
    }
    let scale = var.sqrt();
    let p = basis.num_features();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut phi = vec![0.0; p];
    for (&xi, &yi) in x.iter().zip(y) {
        basis.features(xi, mean, scale, &mut phi);
        for r in 0..p {
            rhs[r] += phi[r] * (yi - y_mean);
            for c in r..p {
                gram[(r, c)] += phi[r] * phi[c];
            }
        }
    }
    for r in 0..p {
        for c in 0..r {
            gram[(r, c)] = gram[(c, r)];
        }
    }
    let lambda = basis.ridge * gram.trace() / p as f64;
    for r in 1..p {
        gram[(r, r)] += lambda;
    }
    let eig = SymmetricEigen::new(gram.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(IsmpError::Regression {
            step,
            reason: "design matrix is rank deficient after ridge".into(),
            condition,
        });
    }
    let coef = gram
        .cholesky()
        .ok_or_else(|| IsmpError::Regression {
            step,
            reason: "Cholesky factorisation failed".into(),
            condition,
        })?
        .solve(&rhs);
    let mut fitted = Vec::with_capacity(m);
    let mut ss = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        basis.features(xi, mean, scale, &mut phi);
        let v = y_mean + phi.iter().zip(coef.iter()).map(|(a, b)| a * b).sum::<f64>();
        ss += (yi - v) * (yi - v);
        fitted.push(v);
    }
    let dof = m.saturating_sub(p).max(1);
    let sigma = (ss / dof as f64).sqrt();
    Ok(Fit {
        fitted,
        se: sigma * (p as f64 / m as f64).sqrt() + floor + condition * f64::EPSILON * spread,
        condition,
    })
}

/// Fitted adjoint `Y(t_k)` per path together with regression diagnostics.
#[derive(Debug, Clone)]
pub struct AdjointEstimate {
    steps: usize,
    num_paths: usize,
    /// `M x (N + 1)`, row-major by path.
    y: Vec<f64>,
    pub basis: RegressionBasis,
    pub estimator: FlowEstimator,
    /// Plain Monte Carlo mean and SE of the payload per step.
    pub payload_mean: Vec<f64>,
    pub payload_se: Vec<f64>,
    /// Fit noise scale `sigma_res sqrt(p / M)` plus a round-off floor.
    pub regression_se: Vec<f64>,
    pub condition: Vec<f64>,
}

impl AdjointEstimate {
    pub fn y(&self, p: usize, k: usize) -> f64 {
        self.y[p * (self.steps + 1) + k]
    }

    pub fn path(&self, p: usize) -> &[f64] {
        &self.y[p * (self.steps + 1)..(p + 1) * (self.steps + 1)]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_paths(&self) -> usize {
        self.num_paths
    }

    /// Cross-sectional mean of `Y(t_k)`.
    pub fn mean(&self, k: usize) -> f64 {
        (0..self.num_paths).map(|p| self.y(p, k)).sum::<f64>() / self.num_paths as f64
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.num_paths).map(|p| self.y(p, k)).collect()
    }
}

/// Least-squares Monte Carlo adjoint driven by the given flow engine.
pub fn adjoint_flow_lsmc(
    ensemble: &PathEnsemble,
    engine: &FlowEngine,
    drift: &DriftSpec,
    cost: &CostSpec,
    basis: &RegressionBasis,
) -> Result<AdjointEstimate> {
    basis.validate()?;
    let n = ensemble.steps();
    let m = ensemble.num_paths();
    let grid = *ensemble.grid();
    let dt = grid.dt();
    let window = grid.full_window();
    let mut payload = vec![0.0; m * (n + 1)];
    payload
        .par_chunks_mut(n + 1)
        .enumerate()
        .try_for_each(|(p, row)| {
            let mut logs = vec![0.0; n];
            engine.log_increments(drift, ensemble, p, window, &mut logs)?;
            let xs = ensemble.path(p);
            row[n] = (cost.dgdx)(xs[n]);
            for k in (0..n).rev() {
                let fx = (cost.dfdx)(grid.time(k), xs[k], ensemble.control(p, k));
                row[k] = fx * dt + logs[k].exp() * row[k + 1];
            }
            if row.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(IsmpError::InvalidArgument(format!("non-finite payload on path {p}")))
            }
        })?;

    let fits: Vec<Fit> = (0..n)
        .into_par_iter()
        .map(|k| {
            let x: Vec<f64> = (0..m).map(|p| ensemble.state(p, k)).collect();
            let y: Vec<f64> = (0..m).map(|p| payload[p * (n + 1) + k]).collect();
            fit_step(basis, k, &x, &y)
        })
        .collect::<Result<_>>()?;

    let mut y = vec![0.0; m * (n + 1)];
    let mut payload_mean = Vec::with_capacity(n + 1);
    let mut payload_se = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let col: Vec<f64> = (0..m).map(|p| payload[p * (n + 1) + k]).collect();
        let (mu, se) = mean_and_se(&col);
        payload_mean.push(mu);
        payload_se.push(se);
    }
    y.par_chunks_mut(n + 1).enumerate().for_each(|(p, row)| {
        for (k, fit) in fits.iter().enumerate() {
            row[k] = fit.fitted[p];
        }
        row[n] = payload[p * (n + 1) + n];
    });
    let mut regression_se: Vec<f64> = fits.iter().map(|f| f.se).collect();
    regression_se.push(0.0);
    let mut condition: Vec<f64> = fits.iter().map(|f| f.condition).collect();
    condition.push(1.0);
    Ok(AdjointEstimate {
        steps: n,
        num_paths: m,
        y,
        basis: basis.clone(),
        estimator: engine.estimator(),
        payload_mean,
        payload_se,
        regression_se,
        condition,
    })
}

/// Per-step mean of `Y_{k+1} - Y_k + (f_x + b_x Y_k) dt` after removing its
/// projection on the Brownian increment.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

/// Absolute floor absorbing round-off in residual comparisons.
pub const RESIDUAL_FLOOR: f64 = 1e-10;

/// `RESIDUAL_FLOOR + dt^2`: the one-step mismatch between `exp(b_x dt)` and
/// the Euler factor `1 + b_x dt` is second order.
pub fn discretization_floor(dt: f64) -> f64 {
    RESIDUAL_FLOOR + dt * dt
}

impl ResidualReport {
    /// Steps with `|mean| > 3 SE + floor`.
    pub fn violations(&self, floor: f64) -> Vec<usize> {
        (0..self.mean.len())
            .filter(|&k| self.mean[k].abs() > 3.0 * self.se[k] + floor)
            .collect()
    }

    pub fn passes(&self, floor: f64) -> bool {
        self.violations(floor).is_empty()
    }

    /// `|sum_k mean_k|`: the accumulated bias, in which step noise averages out.
    pub fn aggregate_bias(&self) -> f64 {
        self.mean.iter().sum::<f64>().abs()
    }

    pub fn mean_abs_sum(&self) -> f64 {
        self.mean.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.mean.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

pub fn bsde_residual_check(
    adjoint: &AdjointEstimate,
    ensemble: &PathEnsemble,
    drift: &DriftSpec,
    cost: &CostSpec,
) -> Result<ResidualReport> {
    let n = ensemble.steps();
    if adjoint.steps() != n || adjoint.num_paths() != ensemble.num_paths() {
        return Err(IsmpError::GridMismatch(
            "adjoint and ensemble have different shapes".into(),
        ));
    }
    let grid = *ensemble.grid();
    let dt = grid.dt();
    let m = ensemble.num_paths();
    let rows: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let t = grid.time(k);
            let mut r = Vec::with_capacity(m);
            let mut db = Vec::with_capacity(m);
            for p in 0..m {
                let x = ensemble.state(p, k);
                let a = ensemble.control(p, k);
                let yk = adjoint.y(p, k);
                let bx = drift.dx(t, x, a)?;
                r.push(adjoint.y(p, k + 1) - yk + ((cost.dfdx)(t, x, a) + bx * yk) * dt);
                db.push(ensemble.scalar_increment(p, k));
            }
            let (rm, _) = mean_and_se(&r);
            let (bm, _) = mean_and_se(&db);
            let cov: f64 = r.iter().zip(&db).map(|(a, b)| (a - rm) * (b - bm)).sum();
            let var: f64 = db.iter().map(|b| (b - bm) * (b - bm)).sum();
            let slope = if var > 0.0 { cov / var } else { 0.0 };
            let adjusted: Vec<f64> = r.iter().zip(&db).map(|(a, b)| a - slope * (b - bm)).collect();
            Ok(mean_and_se(&adjusted))
        })
        .collect::<Result<_>>()?;
    Ok(ResidualReport {
        mean: rows.iter().map(|r| r.0).collect(),
        se: rows.iter().map(|r| r.1).collect(),
    })
}
