//! Grid samples of the rescaled value `w` with accessors for `v` and its
//! gradient.

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::math::Point;
use crate::params::RobustParams;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Solver metadata stored alongside the samples and serialized to the JSON
/// sidecar. Contains no wall-clock data so artifacts reproduce byte-for-byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveMeta {
    pub schema_version: u32,
    pub model_id: String,
    pub p: f64,
    pub m: f64,
    pub horizon: f64,
    pub theta: f64,
    /// Whether the gradient Hamiltonian entered the solve (false for the
    /// benchmark pipeline).
    pub hamiltonian_enabled: bool,
    /// Sup-norm of the discrete residual of the rescaled equation, sampled at
    /// interior time nodes.
    pub residual_inf: f64,
    /// Discretization error estimate from a time-coarsened re-solve
    /// (sup over space at t = 0); 0 when estimation was disabled.
    pub error_estimate: f64,
    /// Empirical constant in `|w - eta| <= C (T-t)^e` at the node nearest the
    /// horizon, with `e = epsilon` when the Hamiltonian is on and `e = 1`
    /// otherwise.
    pub terminal_gap_constant: f64,
    /// `sup_t sup_y |Dw(t, y)|`; boundedness uniformly in `t` mirrors the
    /// gradient estimate `|Dv| <= C (T-t)^{-1/beta}`.
    pub gradient_sup: f64,
    /// Extra reaction linearization passes actually taken across all steps.
    pub newton_extra_iters: usize,
    pub threads: usize,
    /// Hash of the experiment config that produced this solution, when run
    /// through the CLI.
    pub config_hash: Option<String>,
}

/// Space-time samples of `w(t, y) = (T-t)^{1/beta} v(t, y)` and its spatial
/// gradient. Arrays are indexed `[time, y0, y1]` with a singleton second
/// space axis in one dimension.
#[derive(Debug, Clone)]
pub struct ValueSolution {
    pub grid: SpaceTimeGrid,
    pub w: Array3<f64>,
    /// One array per spatial dimension.
    pub dw: Vec<Array3<f64>>,
    pub meta: SolveMeta,
    pub params: RobustParams,
}

impl ValueSolution {
    /// Rescaled value at a node.
    pub fn w_node(&self, j: usize, i0: usize, i1: usize) -> f64 {
        self.w[[j, i0, i1]]
    }

    /// `v = w / (T-t)^{1/beta}` at a node.
    pub fn v_node(&self, j: usize, i0: usize, i1: usize) -> f64 {
        self.w[[j, i0, i1]] / self.grid.time_to_go(j).powf(1.0 / self.params.beta)
    }

    /// Multilinear interpolation of `w` at `(t, y)`.
    pub fn w_at(&self, t: f64, y: Point) -> Result<f64> {
        interp_field(&self.grid, &self.w, t, y)
    }

    /// Value accessor `v(t, y) = w(t, y) / (T-t)^{1/beta}`.
    pub fn v_at(&self, t: f64, y: Point) -> Result<f64> {
        Ok(self.w_at(t, y)? / (self.grid.horizon - t).powf(1.0 / self.params.beta))
    }

    /// Interpolated gradient `Dw(t, y)`.
    pub fn dw_at(&self, t: f64, y: Point) -> Result<Point> {
        let mut g = [0.0, 0.0];
        for d in 0..self.grid.dim() {
            g[d] = interp_field(&self.grid, &self.dw[d], t, y)?;
        }
        Ok(g)
    }

    /// Gradient accessor `Dv(t, y) = Dw(t, y) / (T-t)^{1/beta}`.
    pub fn dv_at(&self, t: f64, y: Point) -> Result<Point> {
        let g = self.dw_at(t, y)?;
        let c = (self.grid.horizon - t).powf(-1.0 / self.params.beta);
        Ok([g[0] * c, g[1] * c])
    }

    /// Build a solution from a closed-form field (test oracles and external
    /// comparisons). `f(t, y)` must return `w`; the gradient is filled by
    /// central differences.
    pub fn from_fn(
        grid: SpaceTimeGrid,
        params: RobustParams,
        model_id: &str,
        f: impl Fn(f64, Point) -> f64,
    ) -> Self {
        let (nt, n0, n1) = (grid.n_t(), grid.n_y(0), grid.n_y1_or_1());
        let mut w = Array3::zeros((nt, n0, n1));
        for j in 0..nt {
            for i0 in 0..n0 {
                for i1 in 0..n1 {
                    w[[j, i0, i1]] = f(grid.t_nodes[j], grid.point(i0, i1));
                }
            }
        }
        let dw = central_gradient(&grid, &w);
        let meta = SolveMeta {
            schema_version: SCHEMA_VERSION,
            model_id: model_id.to_string(),
            p: params.p,
            m: params.m,
            horizon: params.horizon,
            theta: params.theta,
            hamiltonian_enabled: params.theta > 0.0,
            residual_inf: 0.0,
            error_estimate: 0.0,
            terminal_gap_constant: 0.0,
            gradient_sup: dw
                .iter()
                .flat_map(|a| a.iter())
                .fold(0.0f64, |m, &v| m.max(v.abs())),
            newton_extra_iters: 0,
            threads: crate::par::current_threads(),
            config_hash: None,
        };
        ValueSolution { grid, w, dw, meta, params }
    }
}

/// Multilinear interpolation of a `[time, y0, y1]` field over a grid.
pub(crate) fn interp_field(
    grid: &SpaceTimeGrid,
    field: &Array3<f64>,
    t: f64,
    y: Point,
) -> Result<f64> {
    let (jt, ft) = locate(&grid.t_nodes, t).ok_or_else(|| Error::OutOfDomain {
        t,
        y0: y[0],
        y1: y[1],
        message: format!(
            "time outside [{}, {}]",
            grid.t_nodes[0],
            grid.t_nodes[grid.n_t() - 1]
        ),
    })?;
    let (i0, f0) = locate(&grid.y_nodes[0], y[0]).ok_or_else(|| Error::OutOfDomain {
        t,
        y0: y[0],
        y1: y[1],
        message: "first coordinate outside the solved box".into(),
    })?;
    let (i1, f1) = if grid.dim() > 1 {
        locate(&grid.y_nodes[1], y[1]).ok_or_else(|| Error::OutOfDomain {
            t,
            y0: y[0],
            y1: y[1],
            message: "second coordinate outside the solved box".into(),
        })?
    } else {
        (0, 0.0)
    };

    let i1b = if grid.dim() > 1 { i1 + 1 } else { 0 };
    let mut acc = 0.0;
    for (jj, wt) in [(jt, 1.0 - ft), (jt + 1, ft)] {
        if wt == 0.0 {
            continue;
        }
        let c00 = field[[jj, i0, i1]];
        let c10 = field[[jj, i0 + 1, i1]];
        let c01 = field[[jj, i0, i1b]];
        let c11 = field[[jj, i0 + 1, i1b]];
        let v = (1.0 - f0) * ((1.0 - f1) * c00 + f1 * c01) + f0 * ((1.0 - f1) * c10 + f1 * c11);
        acc += wt * v;
    }
    Ok(acc)
}

/// Locate `x` in sorted `nodes`: returns the lower index and the fractional
/// offset in `[0, 1]`. `None` outside the range (up to a tiny tolerance).
pub(crate) fn locate(nodes: &[f64], x: f64) -> Option<(usize, f64)> {
    let n = nodes.len();
    let span = nodes[n - 1] - nodes[0];
    let tol = 1e-12 * span.max(1.0);
    if x < nodes[0] - tol || x > nodes[n - 1] + tol {
        return None;
    }
    if x >= nodes[n - 1] {
        return Some((n - 2, 1.0));
    }
    if x <= nodes[0] {
        return Some((0, 0.0));
    }
    let mut lo = 0;
    let mut hi = n - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if nodes[mid] <= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some((lo, (x - nodes[lo]) / (nodes[lo + 1] - nodes[lo])))
}

/// Second-order central differences in space, one-sided at the box edges.
/// The level count comes from the array, so the helper also serves layer
/// solutions whose time axis differs from the grid's.
pub(crate) fn central_gradient(grid: &SpaceTimeGrid, w: &Array3<f64>) -> Vec<Array3<f64>> {
    let (nt, n0, n1) = w.dim();
    let mut out = Vec::with_capacity(grid.dim());
    for d in 0..grid.dim() {
        let h = grid.spacing(d);
        let mut g = Array3::zeros((nt, n0, n1));
        for j in 0..nt {
            for i0 in 0..n0 {
                for i1 in 0..n1 {
                    let (i, n) = if d == 0 { (i0, n0) } else { (i1, n1) };
                    let pick = |k: usize| {
                        if d == 0 {
                            w[[j, k, i1]]
                        } else {
                            w[[j, i0, k]]
                        }
                    };
                    g[[j, i0, i1]] = if i == 0 {
                        (-3.0 * pick(0) + 4.0 * pick(1) - pick(2)) / (2.0 * h)
                    } else if i == n - 1 {
                        (3.0 * pick(n - 1) - 4.0 * pick(n - 2) + pick(n - 3)) / (2.0 * h)
                    } else {
                        (pick(i + 1) - pick(i - 1)) / (2.0 * h)
                    };
                }
            }
        }
        out.push(g);
    }
    out
}
