use serde::{Deserialize, Serialize};

use crate::error::{IsmpError, Result};

/// Uniform time grid `t_k = k * dt` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(IsmpError::InvalidArgument(format!(
                "time horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps < 2 {
            return Err(IsmpError::InvalidArgument(format!(
                "time grid needs at least 2 steps, got {steps}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Nearest grid index to `t`, clamped to `[0, N]`.
    pub fn index_of(&self, t: f64) -> usize {
        let k = (t / self.dt()).round();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.steps)
        }
    }

    pub fn full_window(&self) -> Window {
        Window {
            start: 0,
            end: self.steps,
        }
    }
}

/// Half-open range of Euler steps `[start, end)`, i.e. the time window
/// `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn from_times(grid: &TimeGrid, s: f64, t: f64) -> Result<Self> {
        if !(s <= t) {
            return Err(IsmpError::InvalidArgument(format!(
                "window start {s} exceeds end {t}"
            )));
        }
        Self::new(grid.index_of(s), grid.index_of(t)).validated(grid)
    }

    pub fn validated(self, grid: &TimeGrid) -> Result<Self> {
        if self.start > self.end || self.end > grid.steps() {
            return Err(IsmpError::GridMismatch(format!(
                "window [{}, {}) is not inside a grid of {} steps",
                self.start,
                self.end,
                grid.steps()
            )));
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points_increase_and_hit_horizon() {
        let g = TimeGrid::new(1.5, 7).unwrap();
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(7), 1.5);
        for k in 0..7 {
            assert!(g.time(k + 1) > g.time(k));
        }
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
    }

    #[test]
    fn window_from_times() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let w = Window::from_times(&g, 0.25, 0.5).unwrap();
        assert_eq!((w.start, w.end), (25, 50));
        assert!(Window::new(10, 200).validated(&g).is_err());
    }
}
