use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{IsmpError, Result};
use crate::rng::{fill_normals, SeedRecord};

use super::control::{ControlLaw, ControlSpec};
use super::drift::{DriftLevel, DriftSpec, SigmaVector};
use super::grid::TimeGrid;

/// Controls recorded during simulation.
#[derive(Clone)]
enum AppliedControl {
    /// One lattice shared by every path (open-loop).
    Shared(Arc<Vec<f64>>),
    /// `M x N x m`, for feedback rules.
    PerPath(Vec<f64>),
}

/// `M` Euler trajectories of the controlled state on a shared grid.
#[derive(Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    sigma: SigmaVector,
    x0: f64,
    num_paths: usize,
    states: Vec<f64>,
    noise: Arc<Vec<f64>>,
    applied: AppliedControl,
    control_dim: usize,
    seed: SeedRecord,
    driftless: bool,
    level: DriftLevel,
}

/// Draws the `M x N x d` Brownian increments, one counter stream per path.
pub fn generate_noise(
    grid: &TimeGrid,
    dim: usize,
    num_paths: usize,
    seed: SeedRecord,
) -> Arc<Vec<f64>> {
    let row = grid.steps() * dim;
    let mut noise = vec![0.0; num_paths * row];
    let scale = grid.dt().sqrt();
    noise.par_chunks_mut(row).enumerate().for_each(|(p, chunk)| {
        let mut rng = seed.stream(p);
        fill_normals(&mut rng, scale, chunk);
    });
    Arc::new(noise)
}

/// Euler-Maruyama `X_{k+1} = X_k + b(t_k, X_k, a_k) dt + sigma . dB_k`.
///
/// Deterministic in `(seed, M, grid)`; the result does not depend on the
/// size of the rayon pool.
pub fn simulate_paths(
    drift: &DriftSpec,
    sigma: &SigmaVector,
    control: &ControlSpec,
    grid: &TimeGrid,
    x0: f64,
    num_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if num_paths == 0 {
        return Err(IsmpError::InvalidArgument("need at least one path".into()));
    }
    let record = SeedRecord::new(seed);
    let noise = generate_noise(grid, sigma.dim(), num_paths, record);
    simulate_with_noise(drift, sigma, control, grid, x0, noise, record)
}

/// Same recursion driven by supplied increments (common random numbers).
pub fn simulate_with_noise(
    drift: &DriftSpec,
    sigma: &SigmaVector,
    control: &ControlSpec,
    grid: &TimeGrid,
    x0: f64,
    noise: Arc<Vec<f64>>,
    seed: SeedRecord,
) -> Result<PathEnsemble> {
    if !x0.is_finite() {
        return Err(IsmpError::InvalidArgument("x0 must be finite".into()));
    }
    control.check_grid(grid)?;
    let n = grid.steps();
    let d = sigma.dim();
    let m = control.dim();
    let row = n * d;
    if noise.is_empty() || !noise.len().is_multiple_of(row) {
        return Err(IsmpError::GridMismatch(format!(
            "noise length {} is not a multiple of N*d = {row}",
            noise.len()
        )));
    }
    let num_paths = noise.len() / row;
    let mut states = vec![0.0; num_paths * (n + 1)];

    let applied = match control.law() {
        ControlLaw::OpenLoop(v) => {
            states
                .par_chunks_mut(n + 1)
                .enumerate()
                .try_for_each(|(p, xs)| {
                    run_path(
                        drift,
                        sigma,
                        control,
                        grid,
                        &noise[p * row..(p + 1) * row],
                        0,
                        n,
                        x0,
                        Some(xs),
                        None,
                    )
                    .map(|_| ())
                })?;
            AppliedControl::Shared(Arc::new(v.clone()))
        }
        ControlLaw::Feedback(_) => {
            let mut controls = vec![0.0; num_paths * n * m];
            states
                .par_chunks_mut(n + 1)
                .zip(controls.par_chunks_mut(n * m))
                .enumerate()
                .try_for_each(|(p, (xs, us))| {
                    run_path(
                        drift,
                        sigma,
                        control,
                        grid,
                        &noise[p * row..(p + 1) * row],
                        0,
                        n,
                        x0,
                        Some(xs),
                        Some(us),
                    )
                    .map(|_| ())
                })?;
            AppliedControl::PerPath(controls)
        }
    };

    Ok(PathEnsemble {
        grid: *grid,
        sigma: sigma.clone(),
        x0,
        num_paths,
        states,
        noise,
        applied,
        control_dim: m,
        seed,
        driftless: drift.is_zero(),
        level: drift.level(),
    })
}

/// Grid, noise shape and seed shared by every simulation of a study.
#[derive(Debug, Clone)]
pub struct McSetup {
    pub grid: TimeGrid,
    pub sigma: SigmaVector,
    pub x0: f64,
    pub num_paths: usize,
    pub seed: u64,
}

impl McSetup {
    pub fn seed_record(&self) -> SeedRecord {
        SeedRecord::new(self.seed)
    }

    pub fn noise(&self) -> Arc<Vec<f64>> {
        generate_noise(&self.grid, self.sigma.dim(), self.num_paths, self.seed_record())
    }

    pub fn simulate(&self, drift: &DriftSpec, control: &ControlSpec) -> Result<PathEnsemble> {
        simulate_paths(drift, &self.sigma, control, &self.grid, self.x0, self.num_paths, self.seed)
    }

    /// Simulation on previously drawn increments (common random numbers).
    pub fn simulate_on(
        &self,
        drift: &DriftSpec,
        control: &ControlSpec,
        noise: &Arc<Vec<f64>>,
    ) -> Result<PathEnsemble> {
        simulate_with_noise(
            drift,
            &self.sigma,
            control,
            &self.grid,
            self.x0,
            noise.clone(),
            self.seed_record(),
        )
    }
}

/// Runs steps `[start, end)` of one path from `x_start`. `states`, when
/// given, is the full `N + 1` row and receives `X_start ..= X_end`;
/// `controls` the full `N x m` row.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_path(
    drift: &DriftSpec,
    sigma: &SigmaVector,
    control: &ControlSpec,
    grid: &TimeGrid,
    noise_row: &[f64],
    start: usize,
    end: usize,
    x_start: f64,
    mut states: Option<&mut [f64]>,
    mut controls: Option<&mut [f64]>,
) -> Result<f64> {
    let d = sigma.dim();
    let m = control.dim();
    let dt = grid.dt();
    let mut a = vec![0.0; m];
    let mut x = x_start;
    if let Some(xs) = states.as_deref_mut() {
        xs[start] = x;
    }
    for k in start..end {
        let t = grid.time(k);
        control.eval(k, t, x, &mut a)?;
        let b = drift.eval_checked(t, x, &a)?;
        x += b * dt + sigma.dot(&noise_row[k * d..(k + 1) * d]);
        if let Some(xs) = states.as_deref_mut() {
            xs[k + 1] = x;
        }
        if let Some(us) = controls.as_deref_mut() {
            us[k * m..(k + 1) * m].copy_from_slice(&a);
        }
    }
    Ok(x)
}

/// Noise-source sanity figures.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSanity {
    /// Pooled mean of all increments.
    pub mean: f64,
    /// `5 sqrt(dt) / sqrt(M N)`
    pub mean_tolerance: f64,
    /// Largest per-step relative deviation of the sample variance from `dt`.
    pub max_rel_variance_error: f64,
    pub passed: bool,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn sigma(&self) -> &SigmaVector {
        &self.sigma
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn num_paths(&self) -> usize {
        self.num_paths
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn seed(&self) -> SeedRecord {
        self.seed
    }

    pub fn is_driftless(&self) -> bool {
        self.driftless
    }

    pub fn level(&self) -> DriftLevel {
        self.level
    }

    pub fn noise(&self) -> &Arc<Vec<f64>> {
        &self.noise
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let n1 = self.grid.steps() + 1;
        &self.states[p * n1..(p + 1) * n1]
    }

    pub fn state(&self, p: usize, k: usize) -> f64 {
        self.states[p * (self.grid.steps() + 1) + k]
    }

    pub fn terminal(&self, p: usize) -> f64 {
        self.state(p, self.grid.steps())
    }

    /// `dB_k` of path `p`, a `d`-vector.
    pub fn increment(&self, p: usize, k: usize) -> &[f64] {
        let d = self.sigma.dim();
        let base = (p * self.grid.steps() + k) * d;
        &self.noise[base..base + d]
    }

    pub fn noise_row(&self, p: usize) -> &[f64] {
        let row = self.grid.steps() * self.sigma.dim();
        &self.noise[p * row..(p + 1) * row]
    }

    /// Increment of the scalar Brownian motion `sigma . B / |sigma|`.
    pub fn scalar_increment(&self, p: usize, k: usize) -> f64 {
        self.sigma.dot(self.increment(p, k)) / self.sigma.norm()
    }

    pub fn control(&self, p: usize, k: usize) -> &[f64] {
        let m = self.control_dim;
        match &self.applied {
            AppliedControl::Shared(v) => &v[k * m..(k + 1) * m],
            AppliedControl::PerPath(v) => {
                let base = (p * self.grid.steps() + k) * m;
                &v[base..base + m]
            }
        }
    }

    /// Checks the pooled mean and per-step variances of the increments.
    pub fn noise_sanity(&self) -> NoiseSanity {
        let n = self.grid.steps();
        let d = self.sigma.dim();
        let dt = self.grid.dt();
        let total = (self.num_paths * n * d) as f64;
        let mean = self.noise.iter().sum::<f64>() / total;
        let mean_tolerance = 5.0 * dt.sqrt() / ((self.num_paths * n) as f64).sqrt();
        let mut max_rel = 0.0f64;
        for k in 0..n {
            for j in 0..d {
                let mut s = 0.0;
                let mut s2 = 0.0;
                for p in 0..self.num_paths {
                    let v = self.increment(p, k)[j];
                    s += v;
                    s2 += v * v;
                }
                let mm = self.num_paths as f64;
                let var = (s2 - s * s / mm) / (mm - 1.0).max(1.0);
                max_rel = max_rel.max((var / dt - 1.0).abs());
            }
        }
        NoiseSanity {
            mean,
            mean_tolerance,
            max_rel_variance_error: max_rel,
            passed: mean.abs() <= mean_tolerance && max_rel <= 0.10,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::control::ControlBox;
    use crate::sde::drift::{ControlledDrift, FnStateDrift};
    use crate::stats::mean_and_se;

    fn zero_control(g: &TimeGrid) -> ControlSpec {
        ControlSpec::constant(g, ControlBox::interval(-1.0, 1.0).unwrap(), 10.0, &[0.0]).unwrap()
    }

    #[test]
    fn driftless_terminal_moments() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let s = SigmaVector::scalar(1.0).unwrap();
        let m = 20_000;
        let e = simulate_paths(&DriftSpec::zero(), &s, &zero_control(&g), &g, 0.0, m, 11).unwrap();
        assert!(e.is_driftless());
        let xs: Vec<f64> = (0..m).map(|p| e.terminal(p)).collect();
        let (mean, se) = mean_and_se(&xs);
        let var = se * se * m as f64;
        assert!(mean.abs() <= 3.0 / (m as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "var {var}");
        for p in 0..m {
            assert_eq!(e.state(p, 0), 0.0);
        }
    }

    #[test]
    fn constant_control_shifts_mean() {
        let g = TimeGrid::new(2.0, 50).unwrap();
        let s = SigmaVector::new(vec![0.6, 0.8]).unwrap();
        let b = ControlBox::interval(-2.0, 2.0).unwrap();
        let c = ControlSpec::constant(&g, b, 10.0, &[0.75]).unwrap();
        let drift = DriftSpec::new(
            Arc::new(FnStateDrift::zero()),
            ControlledDrift::additive_control(2.0),
        );
        let m = 20_000;
        let e = simulate_paths(&drift, &s, &c, &g, 0.3, m, 5).unwrap();
        let xs: Vec<f64> = (0..m).map(|p| e.terminal(p)).collect();
        let (mean, _) = mean_and_se(&xs);
        let expected = 0.3 + 0.75 * 2.0;
        assert!((mean - expected).abs() <= 3.0 * s.norm() * 2f64.sqrt() / (m as f64).sqrt());
    }

    #[test]
    fn noise_source_sanity() {
        let g = TimeGrid::new(1.0, 32).unwrap();
        let s = SigmaVector::scalar(1.0).unwrap();
        let e = simulate_paths(&DriftSpec::zero(), &s, &zero_control(&g), &g, 0.0, 10_000, 3).unwrap();
        let check = e.noise_sanity();
        assert!(check.passed, "{check:?}");
    }

    #[test]
    fn determinism_independent_of_pool_size() {
        let g = TimeGrid::new(1.0, 40).unwrap();
        let s = SigmaVector::scalar(0.7).unwrap();
        let drift = DriftSpec::new(Arc::new(FnStateDrift::step(0.5)), ControlledDrift::zero());
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_paths(&drift, &s, &zero_control(&g), &g, 0.0, 257, 99).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.states(), b.states());
        assert_eq!(a.noise().as_slice(), b.noise().as_slice());
    }

    #[test]
    fn feedback_controls_are_recorded_and_checked() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let s = SigmaVector::scalar(1.0).unwrap();
        let b = ControlBox::interval(-1.0, 1.0).unwrap();
        let rule = ControlSpec::feedback(
            Arc::new(|_, x, out: &mut [f64]| out[0] = (-x).clamp(-1.0, 1.0)),
            b.clone(),
            10.0,
        );
        let drift = DriftSpec::new(
            Arc::new(FnStateDrift::zero()),
            ControlledDrift::additive_control(1.0),
        );
        let e = simulate_paths(&drift, &s, &rule, &g, 0.5, 50, 1).unwrap();
        for p in 0..50 {
            for k in 0..20 {
                assert_eq!(e.control(p, k)[0], (-e.state(p, k)).clamp(-1.0, 1.0));
            }
        }
        let escaping = ControlSpec::feedback(Arc::new(|_, _, out: &mut [f64]| out[0] = 3.0), b, 10.0);
        assert!(simulate_paths(&drift, &s, &escaping, &g, 0.0, 4, 1).is_err());
    }

    #[test]
    fn mismatched_control_lattice_is_rejected() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let other = TimeGrid::new(1.0, 10).unwrap();
        let s = SigmaVector::scalar(1.0).unwrap();
        assert!(simulate_paths(&DriftSpec::zero(), &s, &zero_control(&other), &g, 0.0, 4, 1).is_err());
    }
}
