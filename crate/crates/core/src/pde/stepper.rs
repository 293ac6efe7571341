//! Shared implicit machinery for the backward grid solvers.
//!
//! Every solve in this crate marches a linearized problem
//!
//! ```text
//! dw/ds = L w - r(y) w + q(y)        (s = time to go)
//! ```
//!
//! one step at a time, with `r` and `q` frozen per step (and refreshed by the
//! callers' linearization loops). One dimension yields a single tridiagonal
//! solve; two dimensions use the Douglas splitting, whose line solves are
//! independent and run in parallel. Spatial truncation uses the
//! linear-extrapolation boundary condition: vanishing second derivative and a
//! one-sided first derivative at the box edges.

use super::tridiag;
use crate::grid::SpaceTimeGrid;
use crate::model::FactorModel;
use crate::par;
use ndarray::{Array2, Array3};

/// Source of the risk weight during a solve: the model field itself, or a
/// per-node array replacing it (used by the observational-equivalence refit,
/// where `lambda` becomes time-dependent).
#[derive(Clone, Copy)]
pub enum LambdaSource<'a> {
    Model,
    Grid(&'a Array3<f64>),
}

pub(crate) struct Stepper {
    pub dim: usize,
    pub n0: usize,
    pub n1: usize,
    /// spatial spacing per dimension
    pub h: [f64; 2],
    /// diffusion coefficient per dimension: `(sigma sigma^*)_dd / 2`
    pub a: [f64; 2],
    /// drift values per node and dimension
    pub b: Vec<Array2<f64>>,
}

impl Stepper {
    pub fn new(grid: &SpaceTimeGrid, model: &FactorModel) -> Self {
        let dim = grid.dim();
        let (n0, n1) = (grid.n_y(0), grid.n_y1_or_1());
        let s2 = model.vol.sigma_sq_diag();
        let mut a = [0.0, 0.0];
        let mut h = [1.0, 1.0];
        for d in 0..dim {
            a[d] = 0.5 * s2[d];
            h[d] = grid.spacing(d);
        }
        let mut b = Vec::with_capacity(dim);
        for d in 0..dim {
            let mut arr = Array2::zeros((n0, n1));
            for i0 in 0..n0 {
                for i1 in 0..n1 {
                    arr[[i0, i1]] = model.drift(grid.point(i0, i1))[d];
                }
            }
            b.push(arr);
        }
        Stepper { dim, n0, n1, h, a, b }
    }

    /// Apply the dimension-`d` part of the generator to a level.
    pub fn apply_dim(&self, d: usize, w: &Array2<f64>, out: &mut Array2<f64>) {
        let (n, hd, ad) = (if d == 0 { self.n0 } else { self.n1 }, self.h[d], self.a[d]);
        let get = |w: &Array2<f64>, line: usize, i: usize| -> f64 {
            if d == 0 {
                w[[i, line]]
            } else {
                w[[line, i]]
            }
        };
        let n_lines = if d == 0 { self.n1 } else { self.n0 };
        for line in 0..n_lines {
            for i in 0..n {
                let bd = if d == 0 {
                    self.b[d][[i, line]]
                } else {
                    self.b[d][[line, i]]
                };
                let v = if i == 0 {
                    bd * (get(w, line, 1) - get(w, line, 0)) / hd
                } else if i == n - 1 {
                    bd * (get(w, line, n - 1) - get(w, line, n - 2)) / hd
                } else {
                    ad * (get(w, line, i + 1) - 2.0 * get(w, line, i) + get(w, line, i - 1)) / (hd * hd)
                        + bd * (get(w, line, i + 1) - get(w, line, i - 1)) / (2.0 * hd)
                };
                if d == 0 {
                    out[[i, line]] = v;
                } else {
                    out[[line, i]] = v;
                }
            }
        }
    }

    /// Solve the lines of `(I - dt A_d + dt diag(r)) x = rhs` along dimension
    /// `d`; `r` may be `None` (pure diffusion stage).
    fn implicit_sweep(
        &self,
        d: usize,
        rhs: &Array2<f64>,
        r: Option<&Array2<f64>>,
        dt: f64,
    ) -> Array2<f64> {
        let (n, hd, ad) = (if d == 0 { self.n0 } else { self.n1 }, self.h[d], self.a[d]);
        let n_lines = if d == 0 { self.n1 } else { self.n0 };
        let lines: Vec<Vec<f64>> = par::map_indexed(n_lines, |line| {
            let mut sub = vec![0.0; n];
            let mut diag = vec![0.0; n];
            let mut sup = vec![0.0; n];
            let mut x = vec![0.0; n];
            let mut scratch = vec![0.0; n];
            let at = |arr: &Array2<f64>, i: usize| -> f64 {
                if d == 0 {
                    arr[[i, line]]
                } else {
                    arr[[line, i]]
                }
            };
            for i in 0..n {
                let bd = at(&self.b[d], i);
                let ri = r.map_or(0.0, |r| at(r, i));
                if i == 0 {
                    diag[0] = 1.0 + dt * (bd / hd + ri);
                    sup[0] = -dt * bd / hd;
                } else if i == n - 1 {
                    diag[n - 1] = 1.0 + dt * (-bd / hd + ri);
                    sub[n - 1] = dt * bd / hd;
                } else {
                    sub[i] = -dt * (ad / (hd * hd) - bd / (2.0 * hd));
                    diag[i] = 1.0 + dt * (2.0 * ad / (hd * hd) + ri);
                    sup[i] = -dt * (ad / (hd * hd) + bd / (2.0 * hd));
                }
                x[i] = at(rhs, i);
            }
            tridiag::solve(&sub, &diag, &sup, &mut x, &mut scratch);
            x
        });
        let mut out = Array2::zeros((self.n0, self.n1));
        for (line, vals) in lines.into_iter().enumerate() {
            for (i, v) in vals.into_iter().enumerate() {
                if d == 0 {
                    out[[i, line]] = v;
                } else {
                    out[[line, i]] = v;
                }
            }
        }
        out
    }

    /// One implicit step of `dw/ds = L w - r w + q` from `w_in` over `dt`.
    pub fn implicit_step(
        &self,
        w_in: &Array2<f64>,
        r: &Array2<f64>,
        q: &Array2<f64>,
        dt: f64,
    ) -> Array2<f64> {
        if self.dim == 1 {
            let mut rhs = w_in.clone();
            rhs.zip_mut_with(q, |v, &qi| *v += dt * qi);
            self.implicit_sweep(0, &rhs, Some(r), dt)
        } else {
            // Douglas splitting: implicit in dim 0 (with the reaction),
            // then a correction sweep implicit in dim 1.
            let mut a1w = Array2::zeros((self.n0, self.n1));
            self.apply_dim(1, w_in, &mut a1w);
            let mut rhs = w_in.clone();
            ndarray::Zip::from(&mut rhs).and(&a1w).and(q).for_each(|v, &aw, &qi| {
                *v += dt * (aw + qi);
            });
            let star = self.implicit_sweep(0, &rhs, Some(r), dt);
            let mut rhs2 = star;
            rhs2.zip_mut_with(&a1w, |v, &aw| *v -= dt * aw);
            self.implicit_sweep(1, &rhs2, None, dt)
        }
    }

    /// First-order realization of the transition semigroup `P_dt[phi]`
    /// (one implicit diffusion solve, split by dimension in 2-d).
    pub fn semigroup(&self, phi: &Array2<f64>, dt: f64) -> Array2<f64> {
        let zero_r = Array2::zeros((self.n0, self.n1));
        let zero_q = Array2::zeros((self.n0, self.n1));
        self.implicit_step(phi, &zero_r, &zero_q, dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpaceBox;
    use approx::assert_relative_eq;

    fn make(dim: usize) -> (SpaceTimeGrid, Stepper) {
        let n_space: Vec<usize> = vec![41; dim];
        let grid = SpaceTimeGrid::new(
            1.0,
            1e-3,
            16,
            &SpaceBox::new([-2.0, -2.0], [2.0, 2.0]),
            &n_space,
        )
        .unwrap();
        let model = FactorModel::constant(dim, 1.0, 0.0, 1.0);
        let st = Stepper::new(&grid, &model);
        (grid, st)
    }

    #[test]
    fn constant_state_is_fixed_by_diffusion() {
        for dim in [1, 2] {
            let (_, st) = make(dim);
            let w = Array2::from_elem((st.n0, st.n1), 3.5);
            let out = st.semigroup(&w, 0.01);
            for v in out.iter() {
                assert_relative_eq!(*v, 3.5, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn implicit_step_solves_pure_reaction_exactly() {
        // with L = 0-ish (constant field) and q = 0:
        // (1 + dt r) w+ = w  =>  w+ = w / (1 + dt r)
        let (_, st) = make(1);
        let w = Array2::from_elem((st.n0, st.n1), 2.0);
        let r = Array2::from_elem((st.n0, st.n1), 5.0);
        let q = Array2::zeros((st.n0, st.n1));
        let out = st.implicit_step(&w, &r, &q, 0.1);
        for v in out.iter() {
            assert_relative_eq!(*v, 2.0 / 1.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn heat_kernel_decay_of_fourier_mode() {
        // dw/ds = 1/2 w_yy with w = cos(k y) decays like exp(-k^2 s / 2);
        // one backward-Euler step gives 1 / (1 + dt k^2 / 2) per step.
        let (grid, st) = make(1);
        let k = std::f64::consts::PI / 2.0; // one period over the box
        let mut w = Array2::zeros((st.n0, st.n1));
        for i in 0..st.n0 {
            w[[i, 0]] = (k * grid.y_nodes[0][i]).cos();
        }
        let dt = 0.05;
        let out = st.semigroup(&w, dt);
        // compare at the center where boundary effects are negligible
        let mid = st.n0 / 2;
        let discrete_k2 = 2.0 * (1.0 - (k * grid.spacing(0)).cos()) / grid.spacing(0).powi(2);
        let expect = w[[mid, 0]] / (1.0 + 0.5 * dt * discrete_k2);
        assert_relative_eq!(out[[mid, 0]], expect, max_relative = 1e-3);
    }

    #[test]
    fn douglas_step_consistent_with_unsplit_operator() {
        // For smooth data the split step should match w + dt (L w - r w + q)
        // to first order in dt.
        let (grid, st) = make(2);
        let mut w = Array2::zeros((st.n0, st.n1));
        for i0 in 0..st.n0 {
            for i1 in 0..st.n1 {
                let y = grid.point(i0, i1);
                w[[i0, i1]] = (0.5 * y[0]).sin() + 0.3 * (0.4 * y[1]).cos();
            }
        }
        let r = Array2::from_elem((st.n0, st.n1), 0.7);
        let q = Array2::from_elem((st.n0, st.n1), 0.2);
        let dt = 1e-4;
        let out = st.implicit_step(&w, &r, &q, dt);
        let mut a0 = Array2::zeros((st.n0, st.n1));
        let mut a1 = Array2::zeros((st.n0, st.n1));
        st.apply_dim(0, &w, &mut a0);
        st.apply_dim(1, &w, &mut a1);
        for i0 in 2..st.n0 - 2 {
            for i1 in 2..st.n1 - 2 {
                let euler = w[[i0, i1]]
                    + dt * (a0[[i0, i1]] + a1[[i0, i1]] - 0.7 * w[[i0, i1]] + 0.2);
                assert_relative_eq!(out[[i0, i1]], euler, epsilon = 5.0 * dt * dt);
            }
        }
    }
}
