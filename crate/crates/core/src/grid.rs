use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Discretized time axis `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return config(format!("horizon must be positive and finite, got {horizon}"));
        }
        if n_steps == 0 {
            return config("a time grid needs at least one step");
        }
        let dt = horizon / n_steps as f64;
        let mut times: Vec<f64> = (0..=n_steps).map(|i| i as f64 * dt).collect();
        times[n_steps] = horizon;
        Ok(Self { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return config("a time grid needs at least two instants");
        }
        if times[0] != 0.0 {
            return config(format!("time grid must start at 0, got {}", times[0]));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return config(format!("time grid is not strictly increasing at {} -> {}", w[0], w[1]));
            }
        }
        Ok(Self { times })
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("grid is never empty")
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    pub fn max_dt(&self) -> f64 {
        (0..self.n_steps()).map(|i| self.dt(i)).fold(0.0, f64::max)
    }

    /// Index of the step `[t_i, t_{i+1})` containing `t`, clamped to the last step.
    /// A time equal to a grid point belongs to the step starting there.
    pub fn step_of(&self, t: f64) -> usize {
        let n = self.n_steps();
        if t >= self.times[n] {
            return n - 1;
        }
        match self.times.binary_search_by(|x| x.partial_cmp(&t).expect("finite grid")) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Index of the last grid point `<= t` (or `N` if `t >= T`).
    pub fn last_index_at_or_before(&self, t: f64) -> usize {
        if t >= self.horizon() {
            return self.n_steps();
        }
        self.step_of(t)
    }

    /// Grid with every step split in two.
    pub fn refine(&self) -> TimeGrid {
        let mut times = Vec::with_capacity(2 * self.times.len() - 1);
        for w in self.times.windows(2) {
            times.push(w[0]);
            times.push(0.5 * (w[0] + w[1]));
        }
        times.push(self.horizon());
        TimeGrid { times }
    }

    /// Index of the grid point closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, &s) in self.times.iter().enumerate() {
            if (s - t).abs() < (self.times[best] - t).abs() {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_endpoints() {
        let g = TimeGrid::uniform(2.0, 8).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.horizon(), 2.0);
        assert_eq!(g.n_steps(), 8);
        assert!((g.dt(3) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::uniform(0.0, 4).is_err());
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::from_times(vec![0.1, 0.5]).is_err());
        assert!(TimeGrid::from_times(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::from_times(vec![0.0]).is_err());
        assert!(TimeGrid::from_times(vec![0.0, 0.2, 1.0]).is_ok());
    }

    #[test]
    fn step_lookup() {
        let g = TimeGrid::from_times(vec![0.0, 0.1, 0.4, 1.0]).unwrap();
        assert_eq!(g.step_of(0.0), 0);
        assert_eq!(g.step_of(0.05), 0);
        assert_eq!(g.step_of(0.1), 1);
        assert_eq!(g.step_of(0.99), 2);
        assert_eq!(g.step_of(1.0), 2);
        assert_eq!(g.step_of(5.0), 2);
        assert_eq!(g.last_index_at_or_before(1.0), 3);
        assert_eq!(g.last_index_at_or_before(0.4), 2);
    }

    #[test]
    fn refinement_keeps_coarse_nodes() {
        let g = TimeGrid::from_times(vec![0.0, 0.1, 0.4, 1.0]).unwrap();
        let r = g.refine();
        assert_eq!(r.n_steps(), 6);
        for i in 0..=3 {
            assert_eq!(r.t(2 * i), g.t(i));
        }
    }
}
