use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IsmpError, Result};
use crate::rng::stream_rng;

pub type StateFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type ControlledFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;
/// Writes the control gradient `d/da` into the output slice.
pub type ControlGradFn = Arc<dyn Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync>;

/// Non-zero noise vector `sigma` with its cached squared norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaVector {
    components: Vec<f64>,
    norm_sq: f64,
}

impl SigmaVector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.iter().any(|c| !c.is_finite()) {
            return Err(IsmpError::InvalidArgument(
                "sigma must be a non-empty finite vector".into(),
            ));
        }
        let norm_sq: f64 = components.iter().map(|c| c * c).sum();
        if norm_sq <= 0.0 {
            return Err(IsmpError::InvalidArgument(
                "sigma must satisfy |sigma|^2 > 0".into(),
            ));
        }
        Ok(Self {
            components,
            norm_sq,
        })
    }

    pub fn scalar(s: f64) -> Result<Self> {
        Self::new(vec![s])
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq.sqrt()
    }

    /// `sigma . dB`
    pub fn dot(&self, increments: &[f64]) -> f64 {
        self.components
            .iter()
            .zip(increments)
            .map(|(s, b)| s * b)
            .sum()
    }
}

/// Which drift an object was produced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriftLevel {
    Exact,
    Mollified(u32),
}

impl fmt::Display for DriftLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftLevel::Exact => write!(f, "exact"),
            DriftLevel::Mollified(n) => write!(f, "n={n}"),
        }
    }
}

/// The state-only part `b1(t, x)` of the drift.
///
/// Merely measurable implementations return `None` from `derivative`.
pub trait StateDrift: Send + Sync {
    fn value(&self, t: f64, x: f64) -> f64;

    fn derivative(&self, _t: f64, _x: f64) -> Option<f64> {
        None
    }

    fn value_and_derivative(&self, t: f64, x: f64) -> (f64, Option<f64>) {
        (self.value(t, x), self.derivative(t, x))
    }

    fn has_derivative(&self) -> bool;

    /// Sup-norm bound.
    fn bound(&self) -> f64;

    fn level(&self) -> DriftLevel {
        DriftLevel::Exact
    }

    fn is_zero(&self) -> bool {
        false
    }
}

/// `b1` given by closures.
#[derive(Clone)]
pub struct FnStateDrift {
    f: StateFn,
    dfdx: Option<StateFn>,
    bound: f64,
    zero: bool,
}

impl FnStateDrift {
    pub fn new(f: StateFn, dfdx: Option<StateFn>, bound: f64) -> Self {
        Self {
            f,
            dfdx,
            bound,
            zero: false,
        }
    }

    pub fn zero() -> Self {
        Self {
            f: Arc::new(|_, _| 0.0),
            dfdx: Some(Arc::new(|_, _| 0.0)),
            bound: 0.0,
            zero: true,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(
            Arc::new(move |_, _| c),
            Some(Arc::new(|_, _| 0.0)),
            c.abs(),
        )
    }

    /// `theta * 1_{x > 0}`
    pub fn step(theta: f64) -> Self {
        Self::new(
            Arc::new(move |_, x| if x > 0.0 { theta } else { 0.0 }),
            None,
            theta.abs(),
        )
    }

    /// `scale * tanh(steepness * x)`
    pub fn tanh(scale: f64, steepness: f64) -> Self {
        Self::new(
            Arc::new(move |_, x| scale * (steepness * x).tanh()),
            Some(Arc::new(move |_, x| {
                let c = (steepness * x).cosh();
                scale * steepness / (c * c)
            })),
            scale.abs(),
        )
    }

    /// `scale * sin(x)`
    pub fn sine(scale: f64) -> Self {
        Self::new(
            Arc::new(move |_, x| scale * x.sin()),
            Some(Arc::new(move |_, x| scale * x.cos())),
            scale.abs(),
        )
    }
}

impl StateDrift for FnStateDrift {
    fn value(&self, t: f64, x: f64) -> f64 {
        (self.f)(t, x)
    }

    fn derivative(&self, t: f64, x: f64) -> Option<f64> {
        self.dfdx.as_ref().map(|d| d(t, x))
    }

    fn has_derivative(&self) -> bool {
        self.dfdx.is_some()
    }

    fn bound(&self) -> f64 {
        self.bound
    }

    fn is_zero(&self) -> bool {
        self.zero
    }
}

/// The smooth controlled part `b2(t, x, a)` with its partial derivatives.
#[derive(Clone)]
pub struct ControlledDrift {
    pub f: ControlledFn,
    pub dfdx: ControlledFn,
    pub dfda: ControlGradFn,
    pub bound: f64,
    pub bound_derivative: f64,
    zero: bool,
}

impl ControlledDrift {
    pub fn new(
        f: ControlledFn,
        dfdx: ControlledFn,
        dfda: ControlGradFn,
        bound: f64,
        bound_derivative: f64,
    ) -> Self {
        Self {
            f,
            dfdx,
            dfda,
            bound,
            bound_derivative,
            zero: false,
        }
    }

    pub fn zero() -> Self {
        Self {
            f: Arc::new(|_, _, _| 0.0),
            dfdx: Arc::new(|_, _, _| 0.0),
            dfda: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
            bound: 0.0,
            bound_derivative: 0.0,
            zero: true,
        }
    }

    /// `b2(t, x, a) = a` for a scalar control bounded by `control_bound`.
    pub fn additive_control(control_bound: f64) -> Self {
        Self::new(
            Arc::new(|_, _, a| a[0]),
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _, _, out: &mut [f64]| out[0] = 1.0),
            control_bound,
            1.0,
        )
    }

    /// `b2(t, x, a) = kappa * x + a`. Unbounded in `x`; `bound` is the
    /// sup-norm the caller guarantees over the visited region.
    pub fn linear_state(kappa: f64, bound: f64) -> Self {
        Self::new(
            Arc::new(move |_, x, a| kappa * x + a.first().copied().unwrap_or(0.0)),
            Arc::new(move |_, _, _| kappa),
            Arc::new(|_, _, _, out: &mut [f64]| out.fill(1.0)),
            bound,
            kappa.abs().max(1.0),
        )
    }
}

/// Full drift `b = b1 + b2`.
#[derive(Clone)]
pub struct DriftSpec {
    pub b1: Arc<dyn StateDrift>,
    pub b2: ControlledDrift,
}

impl DriftSpec {
    pub fn new(b1: Arc<dyn StateDrift>, b2: ControlledDrift) -> Self {
        Self { b1, b2 }
    }

    pub fn zero() -> Self {
        Self::new(Arc::new(FnStateDrift::zero()), ControlledDrift::zero())
    }

    pub fn is_zero(&self) -> bool {
        self.b1.is_zero() && self.b2.zero
    }

    pub fn level(&self) -> DriftLevel {
        self.b1.level()
    }

    /// Replaces `b1` by its level-`n` mollification.
    pub fn mollified(&self, level: u32) -> Result<Self> {
        let m = super::mollify::mollify_drift(self.b1.clone(), level)?;
        Ok(Self::new(Arc::new(m), self.b2.clone()))
    }

    /// Evaluates `b1 + b2`, enforcing finiteness and the declared bounds.
    pub fn eval_checked(&self, t: f64, x: f64, a: &[f64]) -> Result<f64> {
        let v1 = self.b1.value(t, x);
        let v2 = (self.b2.f)(t, x, a);
        if !(v1.is_finite() && v2.is_finite()) {
            return Err(IsmpError::NonFiniteDrift {
                t,
                x,
                a: a.to_vec(),
            });
        }
        let slack = 1e-12;
        if v1.abs() > self.b1.bound() * (1.0 + slack) + f64::MIN_POSITIVE {
            return Err(IsmpError::ContractViolation(format!(
                "|b1({t}, {x})| = {} exceeds bound {}",
                v1.abs(),
                self.b1.bound()
            )));
        }
        if v2.abs() > self.b2.bound * (1.0 + slack) + f64::MIN_POSITIVE {
            return Err(IsmpError::ContractViolation(format!(
                "|b2({t}, {x}, {a:?})| = {} exceeds bound {}",
                v2.abs(),
                self.b2.bound
            )));
        }
        Ok(v1 + v2)
    }

    /// `d/dx (b1 + b2)`; fails when `b1` has no derivative.
    pub fn dx(&self, t: f64, x: f64, a: &[f64]) -> Result<f64> {
        let d1 = self.b1.derivative(t, x).ok_or_else(|| {
            IsmpError::MissingDerivative("b1 has no x-derivative; mollify it first".into())
        })?;
        Ok(d1 + (self.b2.dfdx)(t, x, a))
    }

    /// Checks the derivative callbacks of `b2` (and of `b1`, when present)
    /// against central differences at `samples` random points.
    pub fn check_derivatives(
        &self,
        control_dim: usize,
        samples: usize,
        rel_tol: f64,
        seed: u64,
    ) -> Result<()> {
        let mut rng = stream_rng(seed, u64::MAX);
        let mut grad = vec![0.0; control_dim];
        let mut a = vec![0.0; control_dim];
        for _ in 0..samples {
            let t: f64 = rng.gen_range(0.0..1.0);
            let x: f64 = rng.gen_range(-3.0..3.0);
            a.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
            let h = 1e-5 * x.abs().max(1.0);
            let fx = ((self.b2.f)(t, x + h, &a) - (self.b2.f)(t, x - h, &a)) / (2.0 * h);
            compare("db2/dx", (self.b2.dfdx)(t, x, &a), fx, rel_tol)?;
            (self.b2.dfda)(t, x, &a, &mut grad);
            for i in 0..control_dim {
                let mut up = a.clone();
                let mut dn = a.clone();
                let ha = 1e-5 * a[i].abs().max(1.0);
                up[i] += ha;
                dn[i] -= ha;
                let fa = ((self.b2.f)(t, x, &up) - (self.b2.f)(t, x, &dn)) / (2.0 * ha);
                compare("db2/da", grad[i], fa, rel_tol)?;
            }
            if let Some(d1) = self.b1.derivative(t, x) {
                let f1 = (self.b1.value(t, x + h) - self.b1.value(t, x - h)) / (2.0 * h);
                compare("db1/dx", d1, f1, rel_tol)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn compare(name: &str, analytic: f64, numeric: f64, rel_tol: f64) -> Result<()> {
    let scale = analytic.abs().max(numeric.abs()).max(1.0);
    if (analytic - numeric).abs() > rel_tol * scale {
        return Err(IsmpError::ContractViolation(format!(
            "{name} callback {analytic} disagrees with central difference {numeric}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_rejects_zero_vector() {
        assert!(SigmaVector::new(vec![0.0, 0.0]).is_err());
        let s = SigmaVector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(s.norm_sq(), 25.0);
        assert_eq!(s.dot(&[1.0, 1.0]), 7.0);
    }

    #[test]
    fn bound_violation_is_reported() {
        let bad = FnStateDrift::new(Arc::new(|_, _| 2.0), None, 1.0);
        let d = DriftSpec::new(Arc::new(bad), ControlledDrift::zero());
        assert!(matches!(
            d.eval_checked(0.0, 0.0, &[]),
            Err(IsmpError::ContractViolation(_))
        ));
    }

    #[test]
    fn non_finite_drift_names_the_point() {
        let bad = FnStateDrift::new(Arc::new(|_, x| 1.0 / x), None, f64::INFINITY);
        let d = DriftSpec::new(Arc::new(bad), ControlledDrift::zero());
        match d.eval_checked(0.5, f64::NAN, &[]) {
            Err(IsmpError::NonFiniteDrift { t, .. }) => assert_eq!(t, 0.5),
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn derivative_callbacks_match_central_differences() {
        let d = DriftSpec::new(
            Arc::new(FnStateDrift::tanh(1.0, 5.0)),
            ControlledDrift::additive_control(10.0),
        );
        d.check_derivatives(1, 200, 1e-4, 1).unwrap();

        let wrong = ControlledDrift::new(
            Arc::new(|_, x, a| x.sin() + a[0]),
            Arc::new(|_, x, _| x.sin()),
            Arc::new(|_, _, _, out: &mut [f64]| out[0] = 1.0),
            2.0,
            1.0,
        );
        let d = DriftSpec::new(Arc::new(FnStateDrift::zero()), wrong);
        assert!(d.check_derivatives(1, 50, 1e-4, 1).is_err());
    }

    #[test]
    fn missing_derivative_is_an_error() {
        let d = DriftSpec::new(
            Arc::new(FnStateDrift::step(0.5)),
            ControlledDrift::zero(),
        );
        assert!(matches!(
            d.dx(0.0, 0.1, &[]),
            Err(IsmpError::MissingDerivative(_))
        ));
    }
}
