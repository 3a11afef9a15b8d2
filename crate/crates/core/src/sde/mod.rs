//! Controlled diffusion `dX = b(t, X, a) dt + sigma . dB` on a uniform grid.

mod control;
mod drift;
mod ensemble;
mod grid;
mod measure;
mod mollify;

pub use control::{control_distance, ControlBox, ControlLaw, ControlMode, ControlSpec, FeedbackFn};
pub use drift::{
    ControlGradFn, ControlledDrift, ControlledFn, DriftLevel, DriftSpec, FnStateDrift, SigmaVector,
    StateDrift, StateFn,
};
pub(crate) use drift::compare;
pub use ensemble::{
    generate_noise, simulate_paths, simulate_with_noise, McSetup, NoiseSanity, PathEnsemble,
};

pub use grid::{TimeGrid, Window};
pub use measure::{doleans_exponential, girsanov_weights};
pub use mollify::{mollify_drift, MollifiedDrift, MOLLIFIER_NODES};
