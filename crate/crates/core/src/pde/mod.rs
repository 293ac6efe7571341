//! Singular-terminal PDE solver.
//!
//! The value function `v` of the robust liquidation problem solves
//!
//! ```text
//! -dv/dt - L v - H(y, Dv) - F(y, v) = 0,    v(t, y) -> +inf as t -> T,
//! ```
//!
//! with `F(y,v) = lambda - |v|^{beta+1} / (beta eta^beta)` and
//! `H(y,q) = theta^alpha |sigma^* q|^{alpha+1}`. We solve the equivalent
//! equation for the rescaled unknown `w = (T-t)^{1/beta} v`, whose terminal
//! datum is the finite field `eta`:
//!
//! ```text
//! -dw/dt - L w - (T-t)^{-alpha/beta} H(y, Dw) - (T-t)^{1/beta} lambda
//!     + [w^{beta+1}/eta^beta - w] / (beta (T-t)) = 0,     w(T,.) = eta.
//! ```
//!
//! Time stepping marches backward from the horizon with implicit diffusion,
//! a semi-implicit linearization of the stiff reaction, and an explicit
//! gradient term; the first step off the horizon uses the terminal-layer
//! expansion. In two dimensions the implicit part is split dimension by
//! dimension (Douglas scheme) and grid lines are solved in parallel.

mod layer;
mod singular;
mod solution;
mod stepper;
mod tridiag;

pub use layer::{terminal_layer, LayerOptions, TerminalLayerSolution};
pub use singular::{solve_benchmark, solve_singular, solve_singular_with_lambda, terminal_expansion};
pub use solution::{SolveMeta, ValueSolution, SCHEMA_VERSION};
pub use stepper::LambdaSource;

pub(crate) use solution::{central_gradient as gradient_of, interp_field as solution_interp, locate as locate_nodes};

/// Crate-internal access to the implicit stepping machinery (used by the
/// correction solver, which marches a different linear equation on the same
/// grids).
pub(crate) fn stepper_for(
    grid: &crate::grid::SpaceTimeGrid,
    model: &crate::model::FactorModel,
) -> stepper::Stepper {
    stepper::Stepper::new(grid, model)
}

use crate::error::{Error, Result};
use crate::math::{self, Point};
use crate::model::FactorModel;
use crate::params::RobustParams;
use serde::{Deserialize, Serialize};

/// Reaction nonlinearity `F(y, v) = lambda(y) - |v|^{beta+1} / (beta eta(y)^beta)`.
pub fn nonlinearity_f(y: Point, v: f64, model: &FactorModel, params: &RobustParams) -> Result<f64> {
    let eta = model.eta(y);
    if eta <= 0.0 {
        return Err(Error::domain(
            "model",
            format!("eta({:?}) = {eta} is not positive; impact coefficient must be bounded away from zero", y),
        ));
    }
    Ok(model.lambda(y) - v.abs().powf(params.beta + 1.0) / (params.beta * eta.powf(params.beta)))
}

/// Gradient Hamiltonian `H(y, q) = theta^alpha |sigma^*(y) q|^{alpha+1}`,
/// the value of the inner maximization
/// `sup_vartheta { <sigma vartheta, q> - (a/theta) |vartheta|^m }`.
/// Returns 0 when `theta = 0` (benchmark model).
pub fn hamiltonian(y: Point, q: Point, model: &FactorModel, params: &RobustParams) -> f64 {
    if params.theta == 0.0 {
        return 0.0;
    }
    let _ = y; // registry volatility is state-independent
    let z = math::norm(model.vol.sigma_t(q), model.dim);
    params.theta.powf(params.alpha) * z.powf(params.alpha + 1.0)
}

/// Maximizer of the inner problem:
/// `vartheta^* = theta^alpha (1+alpha) |sigma^* q|^{alpha-1} sigma^* q`,
/// continuously extended by zero at `sigma^* q = 0`.
pub fn inner_maximizer(y: Point, q: Point, model: &FactorModel, params: &RobustParams) -> Point {
    let _ = y;
    if params.theta == 0.0 {
        return [0.0, 0.0];
    }
    let z = model.vol.sigma_t(q);
    let zn = math::norm(z, model.dim);
    if zn == 0.0 {
        return [0.0, 0.0];
    }
    let c = params.theta.powf(params.alpha) * (1.0 + params.alpha) * zn.powf(params.alpha - 1.0);
    [c * z[0], c * z[1]]
}

/// Transformed near-terminal nonlinearity in closed form:
///
/// ```text
/// F0 = t L eta + t^p lambda
///      - (eta/beta) [ (1+z)^{beta+1} - 1 - (beta+1) z ]        z = u / (t eta)
///      + theta^alpha t^epsilon | sigma^* (Du/t + D eta) |^{alpha+1}
/// ```
///
/// The bracket equals the tail series `sum_{k>=2} C(beta+1, k) z^k` by the
/// generalized binomial theorem; the closed form avoids truncation error.
/// Errors when `|z| > 1` (the iterate left the contraction ball).
pub fn f0_closed_form(
    t: f64,
    y: Point,
    u: f64,
    du: Point,
    model: &FactorModel,
    params: &RobustParams,
) -> Result<f64> {
    let eta = model.eta(y);
    if eta <= 0.0 {
        return Err(Error::domain("model", format!("eta({y:?}) = {eta} must be positive")));
    }
    if t == 0.0 {
        // all terms vanish in the limit (u = O(t^{1+eps}), Du = O(t^{1/2+eps}))
        return Ok(0.0);
    }
    let z = u / (t * eta);
    if z.abs() > 1.0 {
        return Err(Error::Contraction(format!(
            "series argument |u/(t eta)| = {} > 1 at t = {t}, y = {y:?}",
            z.abs()
        )));
    }
    let mut value = t * model.generator_eta(y) + t.powf(params.p) * model.lambda(y)
        - eta / params.beta * math::binomial_tail(z, params.beta + 1.0);
    if params.theta > 0.0 {
        let deta = model.eta_grad(y);
        let arg = [du[0] / t + deta[0], du[1] / t + deta[1]];
        let zn = math::norm(model.vol.sigma_t(arg), model.dim);
        value += params.theta.powf(params.alpha) * t.powf(params.epsilon) * zn.powf(params.alpha + 1.0);
    }
    Ok(value)
}

/// Options for the grid solvers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Linearization passes of the reaction term per time step (the first is
    /// the semi-implicit step; more are taken while the update exceeds
    /// `newton_tol`).
    pub newton_iters: usize,
    pub newton_tol: f64,
    /// Re-solve on a time-coarsened grid to estimate discretization error.
    pub estimate_error: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            newton_iters: 3,
            newton_tol: 1e-11,
            estimate_error: true,
        }
    }
}
