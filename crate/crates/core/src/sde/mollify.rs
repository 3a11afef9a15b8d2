//! Mollification of the irregular drift part.
//!
//! `b1_n(t, x) = (b1(t, .) * rho_n)(x)` with the C-infinity bump
//! `rho(u) ~ exp(-1 / (1 - u^2))` rescaled to support `[-1/n, 1/n]`.
//! The convolution is a Riemann sum over a lattice `z_i = (i + 1/2) h` fixed in
//! space (`h = 2 / (n * MOLLIFIER_NODES)`), normalised by the discrete kernel
//! mass. Because the nodes do not move with `x`, `b1_n` is an honestly smooth
//! function of `x` and `db1n_dx` is its exact derivative, not a separate
//! approximation. The half-step offset puts the lattice symmetric about the
//! origin, so a jump at `0` mollifies to exactly the midpoint value there.

use std::sync::Arc;

use crate::error::{IsmpError, Result};

use super::drift::{DriftLevel, StateDrift};

/// Lattice nodes across the kernel support.
pub const MOLLIFIER_NODES: usize = 128;

pub struct MollifiedDrift {
    base: Arc<dyn StateDrift>,
    level: u32,
    radius: f64,
    spacing: f64,
}

/// Unnormalised bump and its derivative in `u`.
#[inline]
fn bump(u: f64) -> (f64, f64) {
    let q = 1.0 - u * u;
    if q <= 0.0 {
        return (0.0, 0.0);
    }
    let v = (-1.0 / q).exp();
    (v, v * (-2.0 * u / (q * q)))
}

pub fn mollify_drift(b1: Arc<dyn StateDrift>, level: u32) -> Result<MollifiedDrift> {
    if level == 0 {
        return Err(IsmpError::InvalidArgument(
            "mollification level must be >= 1".into(),
        ));
    }
    if !b1.bound().is_finite() {
        return Err(IsmpError::InvalidArgument(
            "mollification needs a bounded b1".into(),
        ));
    }
    let radius = 1.0 / level as f64;
    Ok(MollifiedDrift {
        base: b1,
        level,
        radius,
        spacing: 2.0 * radius / MOLLIFIER_NODES as f64,
    })
}

impl MollifiedDrift {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn kernel_scale(&self) -> f64 {
        self.radius
    }

    /// `(b1_n, d b1_n / dx)` at `(t, x)`.
    pub fn try_eval(&self, t: f64, x: f64) -> Result<(f64, f64)> {
        let (v, d) = self.eval(t, x);
        if v.is_finite() && d.is_finite() {
            Ok((v, d))
        } else {
            Err(IsmpError::QuadratureFailure { t, x })
        }
    }

    fn eval(&self, t: f64, x: f64) -> (f64, f64) {
        let h = self.spacing;
        let r = self.radius;
        let lo = ((x - r) / h - 0.5).ceil() as i64;
        let hi = ((x + r) / h - 0.5).floor() as i64;
        let (mut num, mut den, mut dnum, mut dden) = (0.0, 0.0, 0.0, 0.0);
        for i in lo..=hi {
            let z = (i as f64 + 0.5) * h;
            let (w, dw) = bump((x - z) / r);
            if w == 0.0 {
                continue;
            }
            let b = self.base.value(t, z);
            num += b * w;
            den += w;
            dnum += b * dw;
            dden += dw;
        }
        if den == 0.0 {
            return (f64::NAN, f64::NAN);
        }
        let value = num / den;
        // d/dx of num/den; the 1/r from the chain rule is applied once here
        let deriv = (dnum * den - num * dden) / (den * den) / r;
        (value, deriv)
    }
}

impl StateDrift for MollifiedDrift {
    fn value(&self, t: f64, x: f64) -> f64 {
        self.eval(t, x).0
    }

    fn derivative(&self, t: f64, x: f64) -> Option<f64> {
        Some(self.eval(t, x).1)
    }

    fn value_and_derivative(&self, t: f64, x: f64) -> (f64, Option<f64>) {
        let (v, d) = self.eval(t, x);
        (v, Some(d))
    }

    fn has_derivative(&self) -> bool {
        true
    }

    fn bound(&self) -> f64 {
        self.base.bound()
    }

    fn level(&self) -> DriftLevel {
        DriftLevel::Mollified(self.level)
    }

    fn is_zero(&self) -> bool {
        self.base.is_zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::drift::FnStateDrift;

    /// Second moment of the normalised bump on [-1, 1] by fine Simpson.
    fn bump_second_moment() -> f64 {
        let n = 20_000;
        let h = 2.0 / n as f64;
        let (mut m0, mut m2) = (0.0, 0.0);
        for i in 0..=n {
            let u = -1.0 + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let q = 1.0 - u * u;
            let f = if q > 0.0 { (-1.0 / q).exp() } else { 0.0 };
            m0 += w * f;
            m2 += w * f * u * u;
        }
        m2 / m0
    }

    #[test]
    fn constant_is_preserved_with_zero_derivative() {
        for n in [1, 3, 16, 64] {
            let m = mollify_drift(Arc::new(FnStateDrift::constant(0.7)), n).unwrap();
            for x in [-2.3, 0.0, 0.013, 5.0] {
                let (v, d) = m.try_eval(0.3, x).unwrap();
                assert!((v - 0.7).abs() <= 1e-14, "n={n} x={x} v={v}");
                assert!(d.abs() <= 1e-10, "n={n} x={x} d={d}");
            }
        }
    }

    #[test]
    fn step_mollifies_to_midpoint_at_jump() {
        for n in [1, 4, 16, 64, 1000] {
            let m = mollify_drift(Arc::new(FnStateDrift::step(1.0)), n).unwrap();
            assert_eq!(m.value(0.0, 0.0), 0.5, "n={n}");
        }
    }

    #[test]
    fn converges_at_continuity_points() {
        let step = Arc::new(FnStateDrift::step(1.0));
        for x in [-0.3, 0.05, 0.2] {
            let exact = step.value(0.0, x);
            let err: Vec<f64> = [4, 16, 64]
                .iter()
                .map(|&n| (mollify_drift(step.clone(), n).unwrap().value(0.0, x) - exact).abs())
                .collect();
            assert!(err[2] <= 1e-12, "x={x} err={err:?}");
        }
    }

    #[test]
    fn smooth_input_error_decays_like_inverse_square() {
        let c = bump_second_moment() / 2.0;
        let sine = Arc::new(FnStateDrift::sine(1.0));
        let mut prev = f64::INFINITY;
        for n in [2u32, 4, 8, 16] {
            let m = mollify_drift(sine.clone(), n).unwrap();
            let sup = (0..400)
                .map(|i| {
                    let x = -3.2 + i as f64 * 0.016;
                    (m.value(0.0, x) - x.sin()).abs()
                })
                .fold(0.0, f64::max);
            let predicted = c / (n as f64 * n as f64);
            assert!(sup < prev);
            assert!(
                (sup / predicted - 1.0).abs() < 0.05,
                "n={n} sup={sup} predicted={predicted}"
            );
            prev = sup;
        }
    }

    #[test]
    fn derivative_is_exact_derivative_of_value() {
        let m = mollify_drift(Arc::new(FnStateDrift::step(0.5)), 8).unwrap();
        for x in [-0.1, -0.01, 0.0, 0.04, 0.11] {
            let h = 1e-6;
            let fd = (m.value(0.0, x + h) - m.value(0.0, x - h)) / (2.0 * h);
            let d = m.derivative(0.0, x).unwrap();
            assert!((fd - d).abs() <= 1e-6 * d.abs().max(1.0), "x={x} fd={fd} d={d}");
        }
    }

    #[test]
    fn rejects_level_zero() {
        assert!(mollify_drift(Arc::new(FnStateDrift::step(1.0)), 0).is_err());
    }
}
