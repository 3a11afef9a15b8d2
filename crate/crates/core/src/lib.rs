//! Monte Carlo tools for the stochastic maximum principle of controlled
//! diffusions whose drift is merely bounded and measurable in the state.
//!
//! The crate is organised by stage of the computation:
//!
//! * [`sde`]: grids, drift and control specifications, mollification,
//!   Euler-Maruyama ensembles, Doleans-Dade / Girsanov weights.
//! * [`localtime`]: Tanaka local time and two estimators of local time-space
//!   integrals, plus the sign calibration tying them together.
//! * [`flow`]: three estimators of the first-variation flow `Phi(t, s)`.
//! * [`adjoint`]: Hamiltonian, least-squares Monte Carlo adjoint process and a
//!   BSDE residual check.
//! * [`smp`]: maximum-principle verifiers, projected-gradient optimizer and
//!   mollification convergence studies.
//! * [`benchmarks`], [`config`], [`io`], [`runner`]: the experiment layer
//!   behind the `ismp` binary.

pub mod adjoint;
pub mod benchmarks;
pub mod config;
pub mod error;
pub mod flow;
pub mod io;
pub mod localtime;
pub mod rng;
pub mod runner;
pub mod sde;
pub mod smp;
pub mod stats;

pub use error::{IsmpError, Result};
