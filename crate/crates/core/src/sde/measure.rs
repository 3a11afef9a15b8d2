//! Doleans-Dade exponentials and Girsanov reweighting.

use rayon::prelude::*;

use crate::error::{IsmpError, Result};

use super::control::ControlSpec;
use super::drift::DriftSpec;
use super::ensemble::PathEnsemble;

/// `E(int q dB) = exp(sum q_k . dB_k - 1/2 sum |q_k|^2 dt)` over steps
/// `[0, up_to)`, per path. `q(p, k, out)` writes the `d`-vector `q_k` of
/// path `p`.
pub fn doleans_exponential<Q>(ensemble: &PathEnsemble, q: Q, up_to: usize) -> Result<Vec<f64>>
where
    Q: Fn(usize, usize, &mut [f64]) -> Result<()> + Sync,
{
    if up_to > ensemble.steps() {
        return Err(IsmpError::GridMismatch(format!(
            "up_to = {up_to} exceeds {} steps",
            ensemble.steps()
        )));
    }
    let d = ensemble.sigma().dim();
    let dt = ensemble.grid().dt();
    (0..ensemble.num_paths())
        .into_par_iter()
        .map(|p| {
            let mut qk = vec![0.0; d];
            let mut log = 0.0;
            for k in 0..up_to {
                q(p, k, &mut qk)?;
                let db = ensemble.increment(p, k);
                let dot: f64 = qk.iter().zip(db).map(|(a, b)| a * b).sum();
                let sq: f64 = qk.iter().map(|a| a * a).sum();
                log += dot - 0.5 * sq * dt;
            }
            let w = log.exp();
            if w.is_finite() {
                Ok(w)
            } else {
                Err(IsmpError::InvalidArgument(format!(
                    "non-finite stochastic exponential on path {p}"
                )))
            }
        })
        .collect()
}

/// Density `dQ/dP = E(int sigma^T / |sigma|^2 b dB)` turning a driftless
/// ensemble into the controlled law.
pub fn girsanov_weights(
    drift: &DriftSpec,
    control: &ControlSpec,
    ensemble: &PathEnsemble,
) -> Result<Vec<f64>> {
    if !ensemble.is_driftless() {
        return Err(IsmpError::InvalidArgument(
            "girsanov_weights needs an ensemble simulated with zero drift".into(),
        ));
    }
    control.check_grid(ensemble.grid())?;
    let sigma = ensemble.sigma();
    let grid = *ensemble.grid();
    let norm_sq = sigma.norm_sq();
    let m = control.dim();
    doleans_exponential(
        ensemble,
        |p, k, out| {
            let x = ensemble.state(p, k);
            let t = grid.time(k);
            let mut a = vec![0.0; m];
            control.eval(k, t, x, &mut a)?;
            let b = drift.eval_checked(t, x, &a)?;
            for (o, s) in out.iter_mut().zip(sigma.components()) {
                *o = s / norm_sq * b;
            }
            Ok(())
        },
        grid.steps(),
    )
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::sde::control::ControlBox;
    use crate::sde::drift::{ControlledDrift, FnStateDrift, SigmaVector};
    use crate::sde::ensemble::simulate_paths;
    use crate::sde::grid::TimeGrid;
    use crate::stats::mean_and_se;

    fn setup(m: usize, n: usize) -> (PathEnsemble, ControlSpec, TimeGrid) {
        let g = TimeGrid::new(1.0, n).unwrap();
        let c = ControlSpec::constant(&g, ControlBox::interval(-1.0, 1.0).unwrap(), 10.0, &[0.4])
            .unwrap();
        let e = simulate_paths(
            &DriftSpec::zero(),
            &SigmaVector::scalar(1.0).unwrap(),
            &c,
            &g,
            0.0,
            m,
            21,
        )
        .unwrap();
        (e, c, g)
    }

    #[test]
    fn zero_integrand_gives_unit_exponential() {
        let (e, _, g) = setup(100, 16);
        let w = doleans_exponential(&e, |_, _, out| {
            out.fill(0.0);
            Ok(())
        }, g.steps())
        .unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unit_integrand_moments() {
        let m = 40_000;
        let (e, _, g) = setup(m, 16);
        let w = doleans_exponential(&e, |_, _, out| {
            out.fill(1.0);
            Ok(())
        }, g.steps())
        .unwrap();
        let (mean, se) = mean_and_se(&w);
        assert!((mean - 1.0).abs() <= 4.0 * se, "mean {mean} se {se}");
        // second moment is lognormal: E[E^2] = e^{int |q|^2 dt} = e
        let sq: Vec<f64> = w.iter().map(|v| v * v).collect();
        let (m2, se2) = mean_and_se(&sq);
        assert!((m2 - 1f64.exp()).abs() <= 4.0 * se2, "m2 {m2} se {se2}");
    }

    #[test]
    fn zero_drift_weights_are_one() {
        let (e, c, _) = setup(50, 16);
        let w = girsanov_weights(&DriftSpec::zero(), &c, &e).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reweighting_reproduces_constant_drift_mean() {
        let m = 40_000;
        let (e, c, g) = setup(m, 32);
        let drift = DriftSpec::new(
            Arc::new(FnStateDrift::constant(0.3)),
            ControlledDrift::additive_control(1.0),
        );
        let w = girsanov_weights(&drift, &c, &e).unwrap();
        let (wm, wse) = mean_and_se(&w);
        assert!((wm - 1.0).abs() <= 4.0 * wse);
        let weighted: Vec<f64> = (0..m).map(|p| w[p] * e.terminal(p)).collect();
        let (gm, gse) = mean_and_se(&weighted);
        let direct = simulate_paths(&drift, e.sigma(), &c, &g, 0.0, m, 77).unwrap();
        let xs: Vec<f64> = (0..m).map(|p| direct.terminal(p)).collect();
        let (dm, dse) = mean_and_se(&xs);
        assert!((gm - dm).abs() <= 3.0 * (gse * gse + dse * dse).sqrt(), "{gm} vs {dm}");
        assert!((dm - 0.7).abs() <= 3.0 * dse);
    }

    #[test]
    fn drifted_ensemble_is_rejected() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let c = ControlSpec::constant(&g, ControlBox::interval(-1.0, 1.0).unwrap(), 10.0, &[0.0])
            .unwrap();
        let drift = DriftSpec::new(Arc::new(FnStateDrift::constant(0.3)), ControlledDrift::zero());
        let e = simulate_paths(&drift, &SigmaVector::scalar(1.0).unwrap(), &c, &g, 0.0, 4, 1).unwrap();
        assert!(girsanov_weights(&drift, &c, &e).is_err());
    }
}
