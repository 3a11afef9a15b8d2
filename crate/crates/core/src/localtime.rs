//! Local time and local time-space integrals of the state process.
//!
//! Two estimators of `int int f(u, z) L^X(du, dz)` are provided:
//!
//! * the smooth identity `-int d_z f(u, X_u) d<X>_u`, exact for `C^1` integrands;
//! * the forward / time-reversed decomposition, which only evaluates `f` and so
//!   handles merely measurable integrands. With `beta = sigma . B / |sigma|`,
//!   `a = |sigma|` and `beta_hat(u) = beta(T - u)`, a path contributes
//!
//!   ```text
//!   s * a * [ sum f(t_j, X_j) d beta_j
//!           + sum_rev f(T - u_i, X_hat_i) dW_i
//!           + k * sum_rev f(T - u_i, X_hat_i) beta_hat(u_i) / (T - u_i) du ]
//!   ```
//!
//!   where the `W` increments are differenced on the grid from
//!   `W(u) = beta_hat(u) - beta(T) + int_u^T beta_hat(r) / (T - r) dr` and the
//!   singular factor is taken at the left end of each reversed step (so it
//!   never touches `u = T`). The signs `(s, k)` are fixed by
//!   [`calibrate_reversal_signs`] against the smooth identity.
//!
//! For drifted ensembles the path itself plays the role of `x + a B`; the
//! estimator then targets the local time of `X`, which is what the flow
//! representation needs.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IsmpError, Result};
use crate::sde::{PathEnsemble, StateDrift, Window};
use crate::stats::{rms, rms_diff};

pub type IntegrandFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Integrand `f(t, z)` with an optional `d/dz` callback.
#[derive(Clone)]
pub struct Integrand {
    pub f: IntegrandFn,
    pub dz: Option<IntegrandFn>,
    pub label: String,
}

impl Integrand {
    pub fn new(label: impl Into<String>, f: IntegrandFn, dz: Option<IntegrandFn>) -> Self {
        Self {
            f,
            dz,
            label: label.into(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("{c}"), Arc::new(move |_, _| c), Some(Arc::new(|_, _| 0.0)))
    }

    pub fn sine() -> Self {
        Self::new("sin z", Arc::new(|_, z| z.sin()), Some(Arc::new(|_, z| z.cos())))
    }

    pub fn cosine() -> Self {
        Self::new("cos z", Arc::new(|_, z| z.cos()), Some(Arc::new(|_, z| -z.sin())))
    }

    pub fn identity() -> Self {
        Self::new("z", Arc::new(|_, z| z), Some(Arc::new(|_, _| 1.0)))
    }

    /// `1_{z > 0}`; no derivative.
    pub fn positive_indicator() -> Self {
        Self::new("1{z>0}", Arc::new(|_, z| if z > 0.0 { 1.0 } else { 0.0 }), None)
    }

    pub fn from_drift(label: impl Into<String>, b: Arc<dyn StateDrift>) -> Self {
        let dz: Option<IntegrandFn> = if b.has_derivative() {
            let bd = b.clone();
            Some(Arc::new(move |t, x| bd.derivative(t, x).unwrap_or(f64::NAN)))
        } else {
            None
        };
        Self::new(label, Arc::new(move |t, x| b.value(t, x)), dz)
    }

    /// `alpha * self + beta * other`
    pub fn combine(&self, alpha: f64, other: &Integrand, beta: f64) -> Integrand {
        let (f1, f2) = (self.f.clone(), other.f.clone());
        let dz: Option<IntegrandFn> = match (&self.dz, &other.dz) {
            (Some(d1), Some(d2)) => {
                let (d1, d2) = (d1.clone(), d2.clone());
                Some(Arc::new(move |t, z| alpha * d1(t, z) + beta * d2(t, z)))
            }
            _ => None,
        };
        Integrand::new(
            format!("{alpha}*({})+{beta}*({})", self.label, other.label),
            Arc::new(move |t, z| alpha * f1(t, z) + beta * f2(t, z)),
            dz,
        )
    }
}

/// The default calibration family `{1, sin z, cos z}`.
pub fn default_calibration_family() -> Vec<Integrand> {
    vec![Integrand::constant(1.0), Integrand::sine(), Integrand::cosine()]
}

/// `L(t_k, a)` per path, row-major `M x (N + 1)`.
#[derive(Debug, Clone)]
pub struct LocalTimeCurve {
    pub level: f64,
    steps: usize,
    values: Vec<f64>,
}

impl LocalTimeCurve {
    pub fn value(&self, p: usize, k: usize) -> f64 {
        self.values[p * (self.steps + 1) + k]
    }

    pub fn terminal(&self, p: usize) -> f64 {
        self.value(p, self.steps)
    }

    pub fn path(&self, p: usize) -> &[f64] {
        &self.values[p * (self.steps + 1)..(p + 1) * (self.steps + 1)]
    }

    pub fn num_paths(&self) -> usize {
        self.values.len() / (self.steps + 1)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Relative round-off band inside which Tanaka increments are set to zero.
pub const TANAKA_SLACK: f64 = 1e-12;

#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Discrete Tanaka-Meyer local time
/// `L(t_k, a) = |X_k - a| - |X_0 - a| - sum_{j<k} sgn(X_j - a)(X_{j+1} - X_j)`
/// with `sgn = -1` on `(-inf, 0]`.
pub fn tanaka_local_time(ensemble: &PathEnsemble, level: f64) -> Result<LocalTimeCurve> {
    let n = ensemble.steps();
    let mut values = vec![0.0; ensemble.num_paths() * (n + 1)];
    values
        .par_chunks_mut(n + 1)
        .enumerate()
        .try_for_each(|(p, out)| {
            let xs = ensemble.path(p);
            let mut acc = 0.0;
            out[0] = 0.0;
            for k in 0..n {
                let (x, y) = (xs[k], xs[k + 1]);
                if !(x.is_finite() && y.is_finite()) {
                    return Err(IsmpError::InvalidArgument(format!(
                        "non-finite state on path {p} at step {k}"
                    )));
                }
                let inc = (y - level).abs() - (x - level).abs() - sgn(x - level) * (y - x);
                let slack = TANAKA_SLACK * (1.0 + x.abs().max(y.abs()).max(level.abs()));
                if inc < -slack {
                    return Err(IsmpError::ContractViolation(format!(
                        "Tanaka increment {inc} below round-off slack on path {p}"
                    )));
                }
                if inc > slack {
                    acc += inc;
                }
                out[k + 1] = acc;
            }
            Ok(())
        })?;
    Ok(LocalTimeCurve {
        level,
        steps: n,
        values,
    })
}

/// Uniform level grid spanning the pooled mean +- 5 sample std (201 points).
pub fn occupation_levels(ensemble: &PathEnsemble) -> Vec<f64> {
    let xs = ensemble.states();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let half = 5.0 * std.max(f64::EPSILON);
    (0..201)
        .map(|i| mean - half + i as f64 * (2.0 * half / 200.0))
        .collect()
}

/// `sum_a L(t_k, a) da` per path over `levels`; approximates `|sigma|^2 t_k`.
pub fn occupation_total(ensemble: &PathEnsemble, levels: &[f64], k: usize) -> Result<Vec<f64>> {
    if levels.len() < 2 {
        return Err(IsmpError::InvalidArgument("need at least two levels".into()));
    }
    let da = levels[1] - levels[0];
    let mut total = vec![0.0; ensemble.num_paths()];
    for &a in levels {
        let curve = tanaka_local_time(ensemble, a)?;
        for (p, t) in total.iter_mut().enumerate() {
            *t += curve.value(p, k) * da;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LtEstimator {
    SmoothIdentity,
    TimeReversal,
}

/// Signs `(s, k)` of the decomposition's overall factor and singular term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignScale {
    pub sigma_sign: f64,
    pub kappa_sign: f64,
}

impl SignScale {
    pub const ALL: [SignScale; 4] = [
        SignScale { sigma_sign: 1.0, kappa_sign: 1.0 },
        SignScale { sigma_sign: 1.0, kappa_sign: -1.0 },
        SignScale { sigma_sign: -1.0, kappa_sign: 1.0 },
        SignScale { sigma_sign: -1.0, kappa_sign: -1.0 },
    ];
}

/// Per-path value of a local time-space integral over a window.
#[derive(Debug, Clone)]
pub struct LocalTimeIntegral {
    pub window: Window,
    pub values: Vec<f64>,
    pub estimator: LtEstimator,
    pub sign_scale: Option<SignScale>,
}

impl LocalTimeIntegral {
    pub fn rms(&self) -> f64 {
        rms(&self.values)
    }
}

/// `-|sigma|^2 sum_j d_z f(t_j, X_j) dt` over the window.
pub fn lt_integral_smooth(
    f: &Integrand,
    ensemble: &PathEnsemble,
    window: Window,
) -> Result<LocalTimeIntegral> {
    let window = window.validated(ensemble.grid())?;
    let dz = f.dz.as_ref().ok_or_else(|| {
        IsmpError::MissingDerivative(format!(
            "integrand '{}' has no d/dz callback; use the time-reversal estimator",
            f.label
        ))
    })?;
    let grid = *ensemble.grid();
    let dt = grid.dt();
    let scale = ensemble.sigma().norm_sq();
    let values = (0..ensemble.num_paths())
        .into_par_iter()
        .map(|p| {
            let xs = ensemble.path(p);
            let s: f64 = (window.start..window.end)
                .map(|j| dz(grid.time(j), xs[j]))
                .sum();
            -scale * s * dt
        })
        .collect();
    Ok(LocalTimeIntegral {
        window,
        values,
        estimator: LtEstimator::SmoothIdentity,
        sign_scale: None,
    })
}

/// Per-step contributions of the time-reversal estimator for path `p`,
/// written to `out[k]` for `k` in the window.
///
/// Step `k` of the original time pairs the forward increment on
/// `[t_k, t_{k+1}]` with reversed step `i = N - 1 - k`, whose left end
/// `u_i = T - t_{k+1}` carries `beta_hat(u_i) = beta(t_{k+1})`.
pub(crate) fn reversal_step_terms(
    f: &Integrand,
    ensemble: &PathEnsemble,
    p: usize,
    window: Window,
    signs: SignScale,
    out: &mut [f64],
) {
    let grid = ensemble.grid();
    let dt = grid.dt();
    let a = ensemble.sigma().norm();
    let xs = ensemble.path(p);
    // beta at the window start
    let mut beta = (0..window.start)
        .map(|k| ensemble.scalar_increment(p, k))
        .sum::<f64>();
    let mut f_left = (f.f)(grid.time(window.start), xs[window.start]);
    for k in window.start..window.end {
        let d_beta = ensemble.scalar_increment(p, k);
        let beta_next = beta + d_beta;
        let f_right = (f.f)(grid.time(k + 1), xs[k + 1]);
        let remaining = grid.time(k + 1); // T - u_i
        let singular = beta_next / remaining * dt;
        // beta_hat(u_{i+1}) - beta_hat(u_i)
        let d_beta_hat = -d_beta;
        // f dW + k f singular, with dW = d_beta_hat - singular
        let backward = f_right * d_beta_hat + (signs.kappa_sign - 1.0) * f_right * singular;
        out[k] = signs.sigma_sign * a * (f_left * d_beta + backward);
        beta = beta_next;
        f_left = f_right;
    }
}

/// Time-reversal estimate of `int int f L(du, dz)` over the window.
pub fn lt_integral_reversal(
    f: &Integrand,
    ensemble: &PathEnsemble,
    window: Window,
    signs: SignScale,
) -> Result<LocalTimeIntegral> {
    let window = window.validated(ensemble.grid())?;
    let report = hx_norm(f, ensemble.x0());
    if !report.finite {
        return Err(IsmpError::InvalidArgument(format!(
            "integrand '{}' is not in H^x at x = {}: {}",
            f.label,
            ensemble.x0(),
            report.diagnostic
        )));
    }
    let n = ensemble.steps();
    let values = (0..ensemble.num_paths())
        .into_par_iter()
        .map(|p| {
            let mut terms = vec![0.0; n];
            reversal_step_terms(f, ensemble, p, window, signs, &mut terms);
            terms[window.start..window.end].iter().sum()
        })
        .collect();
    Ok(LocalTimeIntegral {
        window,
        values,
        estimator: LtEstimator::TimeReversal,
        sign_scale: Some(signs),
    })
}

/// Outcome of [`calibrate_reversal_signs`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub signs: SignScale,
    /// Relative RMS mismatch of the chosen pair.
    pub mismatch: f64,
    /// Runner-up mismatch divided by the best one.
    pub separation: f64,
    /// Mismatch of every candidate pair, in [`SignScale::ALL`] order.
    pub table: Vec<(SignScale, f64)>,
    /// `|sigma|^2` of the calibration ensemble (the `d<X>` normalisation).
    pub norm_sq: f64,
}

/// Largest mismatch accepted before calibration is declared broken.
pub const CALIBRATION_FAILURE_THRESHOLD: f64 = 0.20;

impl Calibration {
    /// Coefficient multiplying `int int b1 L^X` in the flow exponent.
    pub fn flow_coefficient(&self) -> f64 {
        -1.0 / self.norm_sq
    }

    /// `{sigma_sign, kappa_sign, mismatch}` report.
    pub fn report_json(&self) -> String {
        serde_json::json!({
            "sigma_sign": self.signs.sigma_sign,
            "kappa_sign": self.signs.kappa_sign,
            "mismatch": self.mismatch,
            "separation": self.separation,
        })
        .to_string()
    }
}

/// Chooses `(s, k)` minimising the pooled relative RMS mismatch between the
/// reversal and smooth estimators over `family` (full window).
pub fn calibrate_reversal_signs(
    family: &[Integrand],
    ensemble: &PathEnsemble,
) -> Result<Calibration> {
    let window = ensemble.grid().full_window();
    let smooth: Vec<LocalTimeIntegral> = family
        .iter()
        .map(|f| lt_integral_smooth(f, ensemble, window))
        .collect::<Result<_>>()?;
    let denom: f64 = smooth
        .iter()
        .flat_map(|s| s.values.iter())
        .map(|v| v * v)
        .sum();
    if denom == 0.0 {
        return Err(IsmpError::Calibration(
            "every smooth estimate vanishes; include a nonconstant integrand".into(),
        ));
    }
    if family.len() < 3 {
        return Err(IsmpError::Calibration(format!(
            "need at least 3 test integrands, got {}",
            family.len()
        )));
    }
    let mut table = Vec::with_capacity(4);
    for signs in SignScale::ALL {
        let mut num = 0.0;
        for (f, s) in family.iter().zip(&smooth) {
            let r = lt_integral_reversal(f, ensemble, window, signs)?;
            let d = rms_diff(&r.values, &s.values);
            num += d * d * s.values.len() as f64;
        }
        table.push((signs, (num / denom).sqrt()));
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| table[i].1.total_cmp(&table[j].1));
    let (best, second) = (table[order[0]], table[order[1]]);
    if !(best.1 < second.1) {
        return Err(IsmpError::Calibration(format!(
            "sign pairs tie at mismatch {}",
            best.1
        )));
    }
    if best.1 >= CALIBRATION_FAILURE_THRESHOLD {
        return Err(IsmpError::Calibration(format!(
            "best mismatch {} exceeds {CALIBRATION_FAILURE_THRESHOLD}",
            best.1
        )));
    }
    Ok(Calibration {
        signs: best.0,
        mismatch: best.1,
        separation: second.1 / best.1,
        table,
        norm_sq: ensemble.sigma().norm_sq(),
    })
}

/// Two-term norm of `f` in the space of admissible local-time integrands.
#[derive(Debug, Clone, Serialize)]
pub struct HxNormReport {
    pub center: f64,
    pub norm_value: f64,
    pub first_term: f64,
    pub second_term: f64,
    pub finite: bool,
    pub diagnostic: String,
}

const HX_TIME_NODES: usize = 256;
const HX_SPACE_NODES: usize = 1601;
const HX_SPACE_HALF_WIDTH: f64 = 8.0;

/// ```text
/// |f|_x = 2 (int_0^1 int f^2(s,z) e^{-(z-x)^2/2s} dz ds / sqrt(2 pi s))^{1/2}
///       + int_0^1 int |z-x| |f(s,z)| e^{-(z-x)^2/2s} dz ds / (s sqrt(2 pi s))
/// ```
///
/// With `z = x + sqrt(s) u` both inner integrals become Gaussian expectations
/// in `u` (Gaussian-weighted rule on `[-8, 8]`); the time integral uses the
/// graded substitution `s = r^2`, which removes the `s^{-1/2}` singularity.
pub fn hx_norm(f: &Integrand, center: f64) -> HxNormReport {
    let du = 2.0 * HX_SPACE_HALF_WIDTH / HX_SPACE_NODES as f64;
    let gauss: Vec<(f64, f64)> = (0..HX_SPACE_NODES)
        .map(|j| {
            let u = -HX_SPACE_HALF_WIDTH + (j as f64 + 0.5) * du;
            (u, (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt() * du)
        })
        .collect();
    let dr = 1.0 / HX_TIME_NODES as f64;
    let (mut first, mut second) = (0.0, 0.0);
    for i in 0..HX_TIME_NODES {
        let r = (i as f64 + 0.5) * dr;
        let s = r * r;
        let (mut e_sq, mut e_abs) = (0.0, 0.0);
        for &(u, w) in &gauss {
            let v = (f.f)(s, center + r * u);
            e_sq += w * v * v;
            e_abs += w * u.abs() * v.abs();
        }
        // ds = 2 r dr; the second term's s^{-1/2} cancels against r
        first += e_sq * 2.0 * r * dr;
        second += e_abs * 2.0 * dr;
    }
    let first_term = 2.0 * first.sqrt();
    let norm_value = first_term + second;
    let finite = norm_value.is_finite();
    HxNormReport {
        center,
        norm_value,
        first_term,
        second_term: second,
        finite,
        diagnostic: if finite {
            String::new()
        } else {
            format!("quadrature returned {first_term} + {second}")
        },
    }
}
