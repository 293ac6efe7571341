//! Backward solves of the rescaled singular-terminal equation.

use super::solution::{central_gradient, SolveMeta, ValueSolution, SCHEMA_VERSION};
use super::stepper::{LambdaSource, Stepper};
use super::SolverOptions;
use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::math::{self, Point};
use crate::model::FactorModel;
use crate::params::RobustParams;
use ndarray::{Array2, Array3, Axis};

/// `x^b` with fast paths for the exponents produced by `p = 2` models.
#[inline]
fn pow_pos(x: f64, b: f64) -> f64 {
    if b == 1.0 {
        x
    } else if b == 2.0 {
        x * x
    } else {
        x.powf(b)
    }
}

/// First-order near-terminal expansion of the rescaled value:
///
/// ```text
/// w(s, y) ~ eta + (s/2) L eta + s^p lambda / (p+1)
///           + theta^alpha s^epsilon |sigma^* D eta|^{alpha+1} / (1+epsilon)
/// ```
///
/// (the first fixed-point iterate of the terminal layer with the semigroup
/// frozen at the identity). Used to start the march off the horizon, where
/// the reaction quotient is 0/0.
pub fn terminal_expansion(
    s: f64,
    y: Point,
    model: &FactorModel,
    params: &RobustParams,
    with_hamiltonian: bool,
) -> f64 {
    let mut w = model.eta(y)
        + 0.5 * s * model.generator_eta(y)
        + s.powf(params.p) * model.lambda(y) / (params.p + 1.0);
    if with_hamiltonian && params.theta > 0.0 {
        let z = math::norm(model.vol.sigma_t(model.eta_grad(y)), model.dim);
        w += params.theta.powf(params.alpha) * s.powf(params.epsilon)
            * z.powf(params.alpha + 1.0)
            / (1.0 + params.epsilon);
    }
    w
}

/// Solve the rescaled robust equation (gradient Hamiltonian included).
pub fn solve_singular(
    model: &FactorModel,
    params: &RobustParams,
    grid: &SpaceTimeGrid,
    opts: &SolverOptions,
) -> Result<ValueSolution> {
    solve_impl(model, params, grid, opts, true, LambdaSource::Model, true)
}

/// Solve the benchmark equation (Hamiltonian forced to zero).
pub fn solve_benchmark(
    model: &FactorModel,
    params: &RobustParams,
    grid: &SpaceTimeGrid,
    opts: &SolverOptions,
) -> Result<ValueSolution> {
    solve_impl(model, params, grid, opts, false, LambdaSource::Model, true)
}

/// Solve with an explicit choice of Hamiltonian handling and risk-weight
/// source (the observational-equivalence refit re-solves the benchmark
/// pipeline with a per-node array in place of `lambda`).
pub fn solve_singular_with_lambda(
    model: &FactorModel,
    params: &RobustParams,
    grid: &SpaceTimeGrid,
    opts: &SolverOptions,
    include_hamiltonian: bool,
    lambda: LambdaSource<'_>,
) -> Result<ValueSolution> {
    solve_impl(model, params, grid, opts, include_hamiltonian, lambda, true)
}

fn solve_impl(
    model: &FactorModel,
    params: &RobustParams,
    grid: &SpaceTimeGrid,
    opts: &SolverOptions,
    include_h: bool,
    lambda: LambdaSource<'_>,
    allow_error_estimate: bool,
) -> Result<ValueSolution> {
    model.validate()?;
    if grid.dim() != model.dim {
        return Err(Error::domain("grid", "grid dimension does not match the model"));
    }
    if (grid.horizon - params.horizon).abs() > 1e-12 * params.horizon {
        return Err(Error::domain("grid", "grid horizon does not match params"));
    }
    if include_h && params.theta > 0.0 {
        params.require_gradient_regular()?;
    }
    if let LambdaSource::Grid(arr) = lambda {
        if arr.dim() != (grid.n_t(), grid.n_y(0), grid.n_y1_or_1()) {
            return Err(Error::domain("lambda", "risk-weight array does not match the grid"));
        }
    }

    let (nt, n0, n1) = (grid.n_t(), grid.n_y(0), grid.n_y1_or_1());
    let beta = params.beta;
    let inv_beta = 1.0 / beta;
    let alpha_over_beta = params.alpha / beta;
    let theta_pow = if params.theta > 0.0 {
        params.theta.powf(params.alpha)
    } else {
        0.0
    };

    // per-node coefficient tables
    let mut eta = Array2::zeros((n0, n1));
    let mut lam_static = Array2::zeros((n0, n1));
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            let y = grid.point(i0, i1);
            let e = model.eta(y);
            if e <= 0.0 {
                return Err(Error::domain(
                    "model",
                    format!("eta({y:?}) = {e} must be positive on the grid"),
                ));
            }
            eta[[i0, i1]] = e;
            lam_static[[i0, i1]] = model.lambda(y);
        }
    }

    let stepper = Stepper::new(grid, model);
    let mut w = Array3::zeros((nt, n0, n1));
    let mut newton_extra = 0usize;

    // start off the horizon with the layer expansion
    let s_first = grid.time_to_go(nt - 1);
    let mut level = Array2::zeros((n0, n1));
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            level[[i0, i1]] =
                terminal_expansion(s_first, grid.point(i0, i1), model, params, include_h);
        }
    }
    check_positive(&level, grid, nt - 1)?;
    w.index_axis_mut(Axis(0), nt - 1).assign(&level);

    // march backward in t (forward in time-to-go)
    for j in (0..nt - 1).rev() {
        let s_target = grid.time_to_go(j);
        let s_prev = grid.time_to_go(j + 1);
        let dt = s_target - s_prev;

        // explicit Hamiltonian source from the previous level's gradient
        let mut h_source = Array2::zeros((n0, n1));
        if include_h && theta_pow > 0.0 {
            let grad = level_gradient(grid, &level);
            let fac = theta_pow * s_target.powf(-alpha_over_beta);
            for i0 in 0..n0 {
                for i1 in 0..n1 {
                    let g = [
                        grad[0][[i0, i1]],
                        if grid.dim() > 1 { grad[1][[i0, i1]] } else { 0.0 },
                    ];
                    let z = math::norm(model.vol.sigma_t(g), model.dim);
                    h_source[[i0, i1]] = fac * z.powf(params.alpha + 1.0);
                }
            }
        }

        let lam_owned;
        let lam_level: &Array2<f64> = match lambda {
            LambdaSource::Model => &lam_static,
            LambdaSource::Grid(arr) => {
                lam_owned = arr.index_axis(Axis(0), j).to_owned();
                &lam_owned
            }
        };

        // semi-implicit reaction: linearize g(w) = w^{beta+1}/eta^beta - w
        // about the previous level, re-linearizing while the update moves
        let s_pow_lam = pow_pos(s_target, inv_beta);
        let mut linearization = level.clone();
        let mut new_level = level.clone();
        let mut last_delta = f64::INFINITY;
        for pass in 0..opts.newton_iters.max(1) {
            let mut r = Array2::zeros((n0, n1));
            let mut q = Array2::zeros((n0, n1));
            for i0 in 0..n0 {
                for i1 in 0..n1 {
                    let wl = linearization[[i0, i1]];
                    let ratio_pow = pow_pos(wl.abs() / eta[[i0, i1]], beta); // (w/eta)^beta
                    let gval = wl * ratio_pow - wl;
                    let gprime = (beta + 1.0) * ratio_pow - 1.0;
                    r[[i0, i1]] = gprime / (beta * s_target);
                    q[[i0, i1]] = h_source[[i0, i1]] + s_pow_lam * lam_level[[i0, i1]]
                        - (gval - gprime * wl) / (beta * s_target);
                }
            }
            let candidate = stepper.implicit_step(&level, &r, &q, dt);
            last_delta = sup_diff(&candidate, &new_level);
            new_level = candidate;
            if pass > 0 {
                newton_extra += 1;
            }
            let scale = new_level.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
            if last_delta <= opts.newton_tol * scale {
                break;
            }
            linearization = new_level.clone();
        }
        check_positive(&new_level, grid, j)?;
        let scale = new_level.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
        if opts.newton_iters > 1 && last_delta > 1e-4 * scale {
            return Err(Error::Solver {
                t: grid.t_nodes[j],
                node: None,
                message: format!("reaction linearization did not converge (last update {last_delta:.3e})"),
            });
        }
        w.index_axis_mut(Axis(0), j).assign(&new_level);
        level = new_level;
    }

    let dw = central_gradient(grid, &w);
    let gradient_sup = dw
        .iter()
        .flat_map(|a| a.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));

    // terminal gap: |w - eta| <= C s^e at the node nearest the horizon
    let e_eff = if include_h && params.theta > 0.0 { params.epsilon } else { 1.0 };
    let mut gap = 0.0f64;
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            gap = gap.max((w[[nt - 1, i0, i1]] - eta[[i0, i1]]).abs());
        }
    }
    let terminal_gap_constant = gap / s_first.powf(e_eff);

    let residual_inf = residual_sup(grid, &w, &eta, &lam_static, &lambda, model, params, include_h, &stepper);

    let error_estimate = if opts.estimate_error && allow_error_estimate {
        let coarse_grid = grid.time_coarsened()?;
        let coarse_lam = coarse_lambda(&lambda, grid, &coarse_grid);
        let lam_src = match &coarse_lam {
            Some(arr) => LambdaSource::Grid(arr),
            None => LambdaSource::Model,
        };
        let coarse = solve_impl(model, params, &coarse_grid, opts, include_h, lam_src, false)?;
        let mut worst = 0.0f64;
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                worst = worst.max((w[[0, i0, i1]] - coarse.w[[0, i0, i1]]).abs());
            }
        }
        worst
    } else {
        0.0
    };

    let meta = SolveMeta {
        schema_version: SCHEMA_VERSION,
        model_id: model.id.clone(),
        p: params.p,
        m: params.m,
        horizon: params.horizon,
        theta: params.theta,
        hamiltonian_enabled: include_h,
        residual_inf,
        error_estimate,
        terminal_gap_constant,
        gradient_sup,
        newton_extra_iters: newton_extra,
        threads: crate::par::current_threads(),
        config_hash: None,
    };

    Ok(ValueSolution {
        grid: grid.clone(),
        w,
        dw,
        meta,
        params: *params,
    })
}

/// Resample a per-node risk-weight array onto the coarsened time grid by
/// nearest time node (used only for the error estimate).
fn coarse_lambda(
    lambda: &LambdaSource<'_>,
    fine: &SpaceTimeGrid,
    coarse: &SpaceTimeGrid,
) -> Option<Array3<f64>> {
    match lambda {
        LambdaSource::Model => None,
        LambdaSource::Grid(arr) => {
            let (n0, n1) = (fine.n_y(0), fine.n_y1_or_1());
            let mut out = Array3::zeros((coarse.n_t(), n0, n1));
            for j in 0..coarse.n_t() {
                let t = coarse.t_nodes[j];
                let jj = nearest_index(&fine.t_nodes, t);
                out.index_axis_mut(Axis(0), j)
                    .assign(&arr.index_axis(Axis(0), jj));
            }
            Some(out)
        }
    }
}

fn nearest_index(nodes: &[f64], x: f64) -> usize {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (i, &v) in nodes.iter().enumerate() {
        let d = (v - x).abs();
        if d < dist {
            dist = d;
            best = i;
        }
    }
    best
}

fn check_positive(level: &Array2<f64>, grid: &SpaceTimeGrid, j: usize) -> Result<()> {
    for ((i0, i1), &v) in level.indexed_iter() {
        if !(v > 0.0) {
            return Err(Error::Solver {
                t: grid.t_nodes[j],
                node: Some([i0, i1]),
                message: format!("rescaled value lost positivity (w = {v})"),
            });
        }
    }
    Ok(())
}

fn sup_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
}

/// Spatial gradient of a single level (central, one-sided at edges).
pub(crate) fn level_gradient(grid: &SpaceTimeGrid, level: &Array2<f64>) -> Vec<Array2<f64>> {
    let (n0, n1) = level.dim();
    let mut out = Vec::with_capacity(grid.dim());
    for d in 0..grid.dim() {
        let h = grid.spacing(d);
        let n = if d == 0 { n0 } else { n1 };
        let mut g = Array2::zeros((n0, n1));
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                let i = if d == 0 { i0 } else { i1 };
                let pick = |k: usize| {
                    if d == 0 {
                        level[[k, i1]]
                    } else {
                        level[[i0, k]]
                    }
                };
                g[[i0, i1]] = if i == 0 {
                    (-3.0 * pick(0) + 4.0 * pick(1) - pick(2)) / (2.0 * h)
                } else if i == n - 1 {
                    (3.0 * pick(n - 1) - 4.0 * pick(n - 2) + pick(n - 3)) / (2.0 * h)
                } else {
                    (pick(i + 1) - pick(i - 1)) / (2.0 * h)
                };
            }
        }
        out.push(g);
    }
    out
}

/// Sup of the discrete residual of the rescaled equation at a sample of
/// interior time nodes (three-point nonuniform time differences, the same
/// spatial stencils as the march). First-order in the step size by
/// construction; reported as a diagnostic.
#[allow(clippy::too_many_arguments)]
fn residual_sup(
    grid: &SpaceTimeGrid,
    w: &Array3<f64>,
    eta: &Array2<f64>,
    lam_static: &Array2<f64>,
    lambda: &LambdaSource<'_>,
    model: &FactorModel,
    params: &RobustParams,
    include_h: bool,
    stepper: &Stepper,
) -> f64 {
    let nt = grid.n_t();
    let stride = (nt / 16).max(1);
    let mut worst = 0.0f64;
    let mut j = 1;
    while j < nt - 1 {
        let level = w.index_axis(Axis(0), j).to_owned();
        let res = residual_level(grid, w, &level, j, eta, lam_static, lambda, model, params, include_h, stepper);
        worst = worst.max(res);
        j += stride;
    }
    worst
}

#[allow(clippy::too_many_arguments)]
fn residual_level(
    grid: &SpaceTimeGrid,
    w: &Array3<f64>,
    level: &Array2<f64>,
    j: usize,
    eta: &Array2<f64>,
    lam_static: &Array2<f64>,
    lambda: &LambdaSource<'_>,
    model: &FactorModel,
    params: &RobustParams,
    include_h: bool,
    stepper: &Stepper,
) -> f64 {
    let (n0, n1) = level.dim();
    let s = grid.time_to_go(j);
    let beta = params.beta;
    let theta_pow = if include_h && params.theta > 0.0 {
        params.theta.powf(params.alpha)
    } else {
        0.0
    };
    let d0 = grid.t_nodes[j] - grid.t_nodes[j - 1];
    let d1 = grid.t_nodes[j + 1] - grid.t_nodes[j];
    let mut lw = Array2::zeros((n0, n1));
    let mut tmp = Array2::zeros((n0, n1));
    stepper.apply_dim(0, level, &mut lw);
    if grid.dim() > 1 {
        stepper.apply_dim(1, level, &mut tmp);
        lw.zip_mut_with(&tmp, |v, &x| *v += x);
    }
    let grad = level_gradient(grid, level);
    let mut worst = 0.0f64;
    for i0 in 1..n0 - 1 {
        for i1 in 0..n1 {
            if grid.dim() > 1 && (i1 == 0 || i1 == n1 - 1) {
                continue;
            }
            let wm = w[[j - 1, i0, i1]];
            let wc = w[[j, i0, i1]];
            let wp = w[[j + 1, i0, i1]];
            let dwdt = -d1 / (d0 * (d0 + d1)) * wm + (d1 - d0) / (d0 * d1) * wc
                + d0 / (d1 * (d0 + d1)) * wp;
            let g = [
                grad[0][[i0, i1]],
                if grid.dim() > 1 { grad[1][[i0, i1]] } else { 0.0 },
            ];
            let hterm = if theta_pow > 0.0 {
                let z = math::norm(model.vol.sigma_t(g), model.dim);
                theta_pow * s.powf(-params.alpha / beta) * z.powf(params.alpha + 1.0)
            } else {
                0.0
            };
            let lam = match lambda {
                LambdaSource::Model => lam_static[[i0, i1]],
                LambdaSource::Grid(arr) => arr[[j, i0, i1]],
            };
            let e = eta[[i0, i1]];
            let reaction = (wc * pow_pos(wc.abs() / e, beta) - wc) / (beta * s);
            let res = -dwdt - lw[[i0, i1]] - hterm - pow_pos(s, 1.0 / beta) * lam + reaction;
            worst = worst.max(res.abs());
        }
    }
    worst
}
