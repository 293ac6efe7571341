//! Space-time grids for the backward solvers.
//!
//! Time nodes live in `[0, T - tau_min]` and are geometrically refined toward
//! the horizon so the singular reaction and gradient factors are resolved;
//! space nodes are uniform per dimension on a truncation box.

use crate::error::{Error, Result};
use crate::math::Point;
use serde::{Deserialize, Serialize};

/// Axis-aligned spatial truncation box.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpaceBox {
    pub lo: Point,
    pub hi: Point,
}

impl SpaceBox {
    pub fn new(lo: Point, hi: Point) -> Self {
        SpaceBox { lo, hi }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for d in 0..dim {
            if !(self.lo[d] < self.hi[d]) {
                return Err(Error::domain(
                    "sample_box",
                    format!("box must be nonempty per dimension, got [{}, {}] in dim {d}", self.lo[d], self.hi[d]),
                ));
            }
        }
        Ok(())
    }

    pub fn contains(&self, y: Point, dim: usize) -> bool {
        (0..dim).all(|d| y[d] >= self.lo[d] && y[d] <= self.hi[d])
    }

    /// Double the box about its center.
    pub fn doubled(&self) -> Self {
        let mut lo = self.lo;
        let mut hi = self.hi;
        for d in 0..2 {
            let c = 0.5 * (self.lo[d] + self.hi[d]);
            let half = self.hi[d] - c;
            lo[d] = c - 2.0 * half;
            hi[d] = c + 2.0 * half;
        }
        SpaceBox { lo, hi }
    }
}

/// Tensor grid: increasing time nodes `t_0 = 0 < ... < t_{n-1} = T - tau_min`
/// and uniform space nodes per dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    pub horizon: f64,
    pub tau_min: f64,
    pub t_nodes: Vec<f64>,
    pub y_nodes: Vec<Vec<f64>>,
}

impl SpaceTimeGrid {
    /// Geometric time refinement toward the horizon: times-to-go
    /// `s_j = tau_min * rho^j` with `rho` chosen so that `s` spans
    /// `[tau_min, T]` in `n_time` nodes.
    pub fn new(
        horizon: f64,
        tau_min: f64,
        n_time: usize,
        space: &SpaceBox,
        n_space: &[usize],
    ) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::domain("horizon", "horizon must be positive"));
        }
        if !(tau_min > 0.0 && tau_min < horizon) {
            return Err(Error::domain("tau_min", format!("terminal standoff must lie in (0, T), got {tau_min}")));
        }
        if n_time < 4 {
            return Err(Error::domain("n_time", "need at least 4 time nodes"));
        }
        let dim = n_space.len();
        if dim == 0 || dim > 2 {
            return Err(Error::domain("n_space", "need 1 or 2 spatial dimensions"));
        }
        space.validate(dim)?;

        let log_ratio = (horizon / tau_min).ln() / (n_time - 1) as f64;
        let mut t_nodes: Vec<f64> = (0..n_time)
            .map(|j| horizon - tau_min * ((n_time - 1 - j) as f64 * log_ratio).exp())
            .collect();
        t_nodes[0] = 0.0;
        t_nodes[n_time - 1] = horizon - tau_min;

        let mut y_nodes = Vec::with_capacity(dim);
        for d in 0..dim {
            let n = n_space[d];
            if n < 4 {
                return Err(Error::domain("n_space", "need at least 4 nodes per dimension"));
            }
            let h = (space.hi[d] - space.lo[d]) / (n - 1) as f64;
            y_nodes.push((0..n).map(|i| space.lo[d] + h * i as f64).collect());
        }

        Ok(SpaceTimeGrid { horizon, tau_min, t_nodes, y_nodes })
    }

    pub fn dim(&self) -> usize {
        self.y_nodes.len()
    }

    pub fn n_t(&self) -> usize {
        self.t_nodes.len()
    }

    pub fn n_y(&self, d: usize) -> usize {
        self.y_nodes[d].len()
    }

    /// Number of nodes in the (possibly degenerate) second dimension.
    pub fn n_y1_or_1(&self) -> usize {
        if self.dim() > 1 {
            self.n_y(1)
        } else {
            1
        }
    }

    pub fn spacing(&self, d: usize) -> f64 {
        self.y_nodes[d][1] - self.y_nodes[d][0]
    }

    /// Time-to-go `T - t_j`.
    pub fn time_to_go(&self, j: usize) -> f64 {
        self.horizon - self.t_nodes[j]
    }

    pub fn point(&self, i0: usize, i1: usize) -> Point {
        let y1 = if self.dim() > 1 { self.y_nodes[1][i1] } else { 0.0 };
        [self.y_nodes[0][i0], y1]
    }

    pub fn space_box(&self) -> SpaceBox {
        let mut lo = [0.0, 0.0];
        let mut hi = [0.0, 0.0];
        for d in 0..self.dim() {
            lo[d] = self.y_nodes[d][0];
            hi[d] = *self.y_nodes[d].last().unwrap();
        }
        SpaceBox { lo, hi }
    }

    /// Index of the time node closest to the horizon.
    pub fn last_t_index(&self) -> usize {
        self.n_t() - 1
    }

    /// Grid with every other time node (same endpoints family), used for
    /// time-discretization error estimates.
    pub fn time_coarsened(&self) -> Result<Self> {
        let n_time = (self.n_t() + 1) / 2;
        let n_space: Vec<usize> = (0..self.dim()).map(|d| self.n_y(d)).collect();
        SpaceTimeGrid::new(self.horizon, self.tau_min, n_time.max(4), &self.space_box(), &n_space)
    }
}
