use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{IsmpError, Result};

use super::ensemble::PathEnsemble;
use super::grid::TimeGrid;

/// Closed box `[lo, hi]` in `R^m`; the admissible control set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ControlBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(IsmpError::InvalidArgument(
                "control box bounds must be non-empty and of equal length".into(),
            ));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(IsmpError::InvalidArgument(format!(
                "control box needs finite lo <= hi, got {lo:?} / {hi:?}"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.dim()
            && a.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// Euclidean projection, coordinate-wise clipping.
    pub fn project(&self, a: &mut [f64]) {
        for (v, (l, h)) in a.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.lo
            .iter()
            .chain(&self.hi)
            .map(|v| v.abs())
            .fold(0.0, f64::max)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    /// The `2^m` corners plus the center, with duplicates removed.
    pub fn probe_set(&self) -> Vec<Vec<f64>> {
        let m = self.dim();
        let mut out: Vec<Vec<f64>> = Vec::with_capacity((1 << m) + 1);
        for mask in 0..(1usize << m) {
            let corner: Vec<f64> = (0..m)
                .map(|i| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] })
                .collect();
            if !out.contains(&corner) {
                out.push(corner);
            }
        }
        let c = self.center();
        if !out.contains(&c) {
            out.push(c);
        }
        out
    }
}

pub type FeedbackFn = Arc<dyn Fn(f64, f64, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum ControlLaw {
    /// Deterministic lattice `alpha(t_k)`, row-major `N x m`.
    OpenLoop(Vec<f64>),
    /// Markov rule `(t, x) -> a`; supported for verification runs.
    Feedback(FeedbackFn),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlMode {
    OpenLoop,
    Feedback,
}

#[derive(Clone)]
pub struct ControlSpec {
    law: ControlLaw,
    bounds: ControlBox,
    /// Admissibility constant `M` of `E[sup |alpha|^2] < M`.
    moment_bound: f64,
}

impl ControlSpec {
    pub fn open_loop(values: Vec<f64>, bounds: ControlBox, moment_bound: f64) -> Result<Self> {
        let m = bounds.dim();
        if values.is_empty() || !values.len().is_multiple_of(m) {
            return Err(IsmpError::InvalidArgument(format!(
                "open-loop lattice length {} is not a multiple of control dim {m}",
                values.len()
            )));
        }
        for (k, a) in values.chunks(m).enumerate() {
            if !bounds.contains(a) {
                return Err(IsmpError::ContractViolation(format!(
                    "control {a:?} at step {k} leaves the admissible box"
                )));
            }
        }
        let spec = Self {
            law: ControlLaw::OpenLoop(values),
            bounds,
            moment_bound,
        };
        let sup = spec.lattice_sup_sq();
        if !(sup < moment_bound) {
            return Err(IsmpError::ContractViolation(format!(
                "sup |alpha|^2 = {sup} is not below the admissibility constant {moment_bound}"
            )));
        }
        Ok(spec)
    }

    /// Lattice `alpha(t_k) = f(t_k)` for `k < N`, projected into the box.
    pub fn from_fn(
        grid: &TimeGrid,
        bounds: ControlBox,
        moment_bound: f64,
        f: impl Fn(f64) -> Vec<f64>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.steps() * bounds.dim());
        for k in 0..grid.steps() {
            let mut a = f(grid.time(k));
            if a.len() != bounds.dim() {
                return Err(IsmpError::InvalidArgument(
                    "control function returned the wrong dimension".into(),
                ));
            }
            bounds.project(&mut a);
            values.extend(a);
        }
        Self::open_loop(values, bounds, moment_bound)
    }

    pub fn constant(grid: &TimeGrid, bounds: ControlBox, moment_bound: f64, c: &[f64]) -> Result<Self> {
        let c = c.to_vec();
        Self::from_fn(grid, bounds, moment_bound, move |_| c.clone())
    }

    pub fn feedback(rule: FeedbackFn, bounds: ControlBox, moment_bound: f64) -> Self {
        Self {
            law: ControlLaw::Feedback(rule),
            bounds,
            moment_bound,
        }
    }

    pub fn law(&self) -> &ControlLaw {
        &self.law
    }

    pub fn mode(&self) -> ControlMode {
        match self.law {
            ControlLaw::OpenLoop(_) => ControlMode::OpenLoop,
            ControlLaw::Feedback(_) => ControlMode::Feedback,
        }
    }

    pub fn bounds(&self) -> &ControlBox {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn moment_bound(&self) -> f64 {
        self.moment_bound
    }

    pub fn lattice(&self) -> Option<&[f64]> {
        match &self.law {
            ControlLaw::OpenLoop(v) => Some(v),
            ControlLaw::Feedback(_) => None,
        }
    }

    pub fn lattice_steps(&self) -> Option<usize> {
        self.lattice().map(|v| v.len() / self.dim())
    }

    fn lattice_sup_sq(&self) -> f64 {
        match &self.law {
            ControlLaw::OpenLoop(v) => v
                .chunks(self.dim())
                .map(|a| a.iter().map(|x| x * x).sum::<f64>())
                .fold(0.0, f64::max),
            ControlLaw::Feedback(_) => 0.0,
        }
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if let Some(steps) = self.lattice_steps() {
            if steps != grid.steps() {
                return Err(IsmpError::GridMismatch(format!(
                    "control lattice has {steps} steps, grid has {}",
                    grid.steps()
                )));
            }
        }
        Ok(())
    }

    /// Control applied at step `k` from state `x`; feedback values are
    /// checked against the box.
    pub fn eval(&self, k: usize, t: f64, x: f64, out: &mut [f64]) -> Result<()> {
        match &self.law {
            ControlLaw::OpenLoop(v) => {
                let m = self.dim();
                out.copy_from_slice(&v[k * m..(k + 1) * m]);
            }
            ControlLaw::Feedback(rule) => {
                rule(t, x, out);
                if !self.bounds.contains(out) {
                    return Err(IsmpError::ContractViolation(format!(
                        "feedback control {out:?} at (t={t}, x={x}) leaves the admissible box"
                    )));
                }
            }
        }
        Ok(())
    }

    /// New open-loop control `Proj(alpha + step * direction)`.
    pub fn stepped(&self, direction: &[f64], step: f64) -> Result<Self> {
        let v = self.lattice().ok_or_else(|| {
            IsmpError::InvalidArgument("only open-loop controls can be stepped".into())
        })?;
        if v.len() != direction.len() {
            return Err(IsmpError::GridMismatch(
                "direction lattice length differs from control lattice".into(),
            ));
        }
        let m = self.dim();
        let mut next: Vec<f64> = v.iter().zip(direction).map(|(a, d)| a + step * d).collect();
        for a in next.chunks_mut(m) {
            self.bounds.project(a);
        }
        Self::open_loop(next, self.bounds.clone(), self.moment_bound)
    }

    /// `alpha + eps * eta` without projection; errors if it leaves the box.
    pub fn perturbed(&self, direction: &[f64], eps: f64) -> Result<Self> {
        let v = self.lattice().ok_or_else(|| {
            IsmpError::InvalidArgument("only open-loop controls can be perturbed".into())
        })?;
        if v.len() != direction.len() {
            return Err(IsmpError::GridMismatch(
                "direction lattice length differs from control lattice".into(),
            ));
        }
        let next: Vec<f64> = v.iter().zip(direction).map(|(a, d)| a + eps * d).collect();
        Self::open_loop(next, self.bounds.clone(), self.moment_bound)
    }
}

/// `delta(a1, a2) = sqrt(E[sup_k |a1(t_k) - a2(t_k)|^2])`.
///
/// Open-loop pairs are deterministic and need no ensemble; feedback controls
/// are evaluated along the ensemble's paths.
pub fn control_distance(
    a1: &ControlSpec,
    a2: &ControlSpec,
    grid: &TimeGrid,
    ensemble: Option<&PathEnsemble>,
) -> Result<f64> {
    if a1.dim() != a2.dim() {
        return Err(IsmpError::GridMismatch("control dimensions differ".into()));
    }
    a1.check_grid(grid)?;
    a2.check_grid(grid)?;
    let m = a1.dim();
    if let (Some(v1), Some(v2)) = (a1.lattice(), a2.lattice()) {
        let sup = v1
            .chunks(m)
            .zip(v2.chunks(m))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
            .fold(0.0, f64::max);
        return Ok(sup.sqrt());
    }
    let ens = ensemble.ok_or_else(|| {
        IsmpError::InvalidArgument("feedback controls need an ensemble to measure distance".into())
    })?;
    if ens.grid() != grid {
        return Err(IsmpError::GridMismatch("ensemble grid differs".into()));
    }
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; m];
    let mut acc = 0.0;
    for p in 0..ens.num_paths() {
        let mut sup = 0.0f64;
        for k in 0..grid.steps() {
            let x = ens.state(p, k);
            a1.eval(k, grid.time(k), x, &mut u)?;
            a2.eval(k, grid.time(k), x, &mut v)?;
            let d: f64 = u.iter().zip(&v).map(|(p, q)| (p - q) * (p - q)).sum();
            sup = sup.max(d);
        }
        acc += sup;
    }
    Ok((acc / ens.num_paths() as f64).sqrt())
}
