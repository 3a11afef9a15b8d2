//! Built-in benchmark problems.
//!
//! All three share `b2 = a`, `f = c x - a^2 / 2`, `g = x` and differ in the
//! state-dependent drift:
//!
//! | id | `b1`              | oracle          |
//! |----|-------------------|-----------------|
//! | B1 | `0`               | closed form     |
//! | B2 | `tanh(k x)`       | cross-estimator |
//! | B3 | `theta 1{x > 0}`  | stability       |
//!
//! For B1 the flow is identically one, so `Y(t) = 1 + c (T - t)` and the
//! optimal open-loop control is `a(t) = 1 + c (T - t)` (clipped to the box).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adjoint::CostSpec;
use crate::error::{IsmpError, Result};
use crate::sde::{ControlBox, ControlSpec, ControlledDrift, DriftSpec, FnStateDrift, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BenchmarkId {
    B1,
    B2,
    B3,
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for BenchmarkId {
    type Err = IsmpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "B1" => Ok(BenchmarkId::B1),
            "B2" => Ok(BenchmarkId::B2),
            "B3" => Ok(BenchmarkId::B3),
            _ => Err(IsmpError::Config(format!(
                "unknown benchmark '{s}' (expected B1, B2 or B3)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleType {
    Analytic,
    CrossEstimator,
    Stability,
}

/// Tunable constants of the benchmark family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkParams {
    /// Running-cost slope `c`.
    pub c: f64,
    /// Jump height of the B3 drift.
    pub theta: f64,
    /// Steepness of the B2 drift.
    pub steepness: f64,
    pub control_lo: f64,
    pub control_hi: f64,
    /// Admissibility constant `M` (`sup |a|^2 < M`).
    pub moment_bound: f64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            c: 0.5,
            theta: 0.5,
            steepness: 5.0,
            control_lo: -10.0,
            control_hi: 10.0,
            moment_bound: 1e4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Benchmark {
    pub id: BenchmarkId,
    pub name: &'static str,
    pub description: &'static str,
    pub oracle: OracleType,
    /// Acceptance criteria (by number) this benchmark backs.
    pub criteria: Vec<u8>,
    pub defaults: BenchmarkParams,
}

impl Benchmark {
    pub fn drift(&self, params: &BenchmarkParams) -> DriftSpec {
        let bound = params.control_lo.abs().max(params.control_hi.abs());
        let b2 = ControlledDrift::additive_control(bound);
        match self.id {
            BenchmarkId::B1 => DriftSpec::new(Arc::new(FnStateDrift::zero()), b2),
            BenchmarkId::B2 => {
                DriftSpec::new(Arc::new(FnStateDrift::tanh(1.0, params.steepness)), b2)
            }
            BenchmarkId::B3 => DriftSpec::new(Arc::new(FnStateDrift::step(params.theta)), b2),
        }
    }

    pub fn cost(&self, params: &BenchmarkParams) -> CostSpec {
        let bound = params.control_lo.abs().max(params.control_hi.abs());
        CostSpec::linear_bequest(params.c, bound)
    }

    pub fn control_box(&self, params: &BenchmarkParams) -> Result<ControlBox> {
        ControlBox::interval(params.control_lo, params.control_hi)
    }

    /// Clipped closed-form optimum (B1 only).
    pub fn analytic_control(&self, params: &BenchmarkParams, grid: &TimeGrid) -> Result<Option<ControlSpec>> {
        if self.id != BenchmarkId::B1 {
            return Ok(None);
        }
        let c = params.c;
        let horizon = grid.horizon();
        ControlSpec::from_fn(grid, self.control_box(params)?, params.moment_bound, |t| {
            vec![1.0 + c * (horizon - t)]
        })
        .map(Some)
    }

    /// Closed-form adjoint `1 + c (T - t)` (B1 only).
    pub fn analytic_adjoint(&self, params: &BenchmarkParams, horizon: f64, t: f64) -> Option<f64> {
        (self.id == BenchmarkId::B1).then_some(1.0 + params.c * (horizon - t))
    }
}

pub fn registry() -> Vec<Benchmark> {
    vec![
        Benchmark {
            id: BenchmarkId::B1,
            name: "linear-bequest",
            description: "g = x, f = c x - a^2/2, b = a; optimum a(t) = 1 + c (T - t)",
            oracle: OracleType::Analytic,
            criteria: vec![3, 4, 6, 8],
            defaults: BenchmarkParams::default(),
        },
        Benchmark {
            id: BenchmarkId::B2,
            name: "smooth-tanh",
            description: "b1 = tanh(5 x), b2 = a, cost of B1; flows cross-checked by three estimators",
            oracle: OracleType::CrossEstimator,
            criteria: vec![1, 6],
            defaults: BenchmarkParams::default(),
        },
        Benchmark {
            id: BenchmarkId::B3,
            name: "discontinuous-step",
            description: "b1 = 0.5 1{x > 0}, b2 = a, cost of B1; mollification stability",
            oracle: OracleType::Stability,
            criteria: vec![5, 6, 7],
            defaults: BenchmarkParams::default(),
        },
    ]
}

pub fn lookup(id: BenchmarkId) -> Benchmark {
    registry()
        .into_iter()
        .find(|b| b.id == id)
        .expect("registry covers every id")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_three_entries_with_oracles() {
        let r = registry();
        assert_eq!(r.len(), 3);
        assert_eq!(
            r.iter().map(|b| b.oracle).collect::<Vec<_>>(),
            vec![OracleType::Analytic, OracleType::CrossEstimator, OracleType::Stability]
        );
        assert!(r.iter().all(|b| !b.criteria.is_empty()));
    }

    #[test]
    fn ids_parse() {
        assert_eq!("b3".parse::<BenchmarkId>().unwrap(), BenchmarkId::B3);
        assert!("B4".parse::<BenchmarkId>().is_err());
    }

    #[test]
    fn b1_optimum_and_drifts() {
        let p = BenchmarkParams::default();
        let g = TimeGrid::new(1.0, 4).unwrap();
        let b1 = lookup(BenchmarkId::B1);
        let a = b1.analytic_control(&p, &g).unwrap().unwrap();
        assert_eq!(a.lattice().unwrap(), &[1.5, 1.375, 1.25, 1.125]);
        assert!(lookup(BenchmarkId::B3).analytic_control(&p, &g).unwrap().is_none());
        let d3 = lookup(BenchmarkId::B3).drift(&p);
        assert_eq!(d3.eval_checked(0.0, 0.1, &[0.0]).unwrap(), 0.5);
        assert_eq!(d3.eval_checked(0.0, 0.0, &[0.2]).unwrap(), 0.2);
        assert!(d3.dx(0.0, 0.0, &[0.0]).is_err());
        let d2 = lookup(BenchmarkId::B2).drift(&p);
        assert!((d2.dx(0.0, 0.0, &[0.0]).unwrap() - 5.0).abs() < 1e-12);
    }
}
