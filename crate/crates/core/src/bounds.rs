//! Explicit sub/supersolution surfaces and sandwich certificates.
//!
//! Near the horizon the value is pinched between two computable surfaces:
//!
//! ```text
//! lower(t, y) = eta (1 - |L eta / eta|_sup (T-t)) / (T-t)^{1/beta}
//! upper(t, y) = eta (1 + K (T-t)^epsilon) / (T-t)^{1/beta} + hhat(t, y)
//! hhat(t, y)  = exp(L (T-t)) <y>^n
//! ```
//!
//! with `K >= (2 C + 2^{2 alpha + 1} C^{alpha + 2}) / (1 + epsilon)` and the
//! window `delta = min{ delta_0 (1 - ((beta/2 + 1)/(beta + 1))^{1/beta}),
//! delta_1 }`, `delta_0 = 1 / |L eta / eta|_sup`,
//! `delta_1 = min{1, (1/K)^{1/epsilon}}`. Sup norms are sampled sups over a
//! box, inflated by a safety factor that is recorded in the output; `L` comes
//! from a doubling line search over the exponential-weight inequality.

use crate::error::{Error, Result};
use crate::grid::SpaceBox;
use crate::math::{self, Point};
use crate::model::FactorModel;
use crate::params::RobustParams;
use crate::pde::ValueSolution;
use serde::{Deserialize, Serialize};

/// Constants behind the bound surfaces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundConstants {
    /// Bump coefficient `K` of the supersolution.
    pub bump_coeff: f64,
    /// Exponential rate `L` in the weight `hhat`.
    pub weight_rate: f64,
    /// `delta_0 = 1 / |L eta / eta|_sup`; infinite for constant impact.
    pub delta0: f64,
    pub delta1: f64,
    /// Width of the certified window `[T - delta, T)`.
    pub delta: f64,
    /// Inflated sampled sup of `|L eta / eta|`.
    pub sup_generator_ratio: f64,
    /// Polynomial growth order `n` of the weight.
    pub growth_order: f64,
    /// Analytic hint that seeded the `L` line search (first tested value).
    pub l_search_start: f64,
    /// Safety inflation applied to sampled sups.
    pub inflation: f64,
    pub samples: usize,
}

/// Compute the bound constants for a model. Sup norms are sampled over
/// `sample_box` with `n_samples` quasi-random points and inflated by
/// `inflation` (>= 1).
pub fn compute_constants(
    model: &FactorModel,
    params: &RobustParams,
    sample_box: &SpaceBox,
    n_samples: usize,
    inflation: f64,
) -> Result<BoundConstants> {
    model.validate()?;
    sample_box.validate(model.dim)?;
    if params.epsilon <= 0.0 {
        return Err(Error::domain(
            "params",
            "bound surfaces need epsilon = 1 - alpha/beta > 0 (beta > alpha)",
        ));
    }
    if !(inflation >= 1.0) {
        return Err(Error::domain("inflation", "safety inflation must be >= 1"));
    }
    let n_samples = n_samples.max(16);

    let mut ratio_sup = 0.0f64;
    for i in 0..n_samples {
        let y = math::halton_point(i as u64, sample_box.lo, sample_box.hi, model.dim);
        let eta = model.eta(y);
        if eta <= 0.0 {
            return Err(Error::domain("model", format!("eta({y:?}) must be positive")));
        }
        ratio_sup = ratio_sup.max((model.generator_eta(y) / eta).abs());
    }
    ratio_sup *= inflation;

    let c = model.bounds.c_upper;
    let alpha = params.alpha;
    let eps = params.epsilon;
    let bump_coeff =
        (2.0 * c + 2.0f64.powf(2.0 * alpha + 1.0) * c.powf(alpha + 2.0)) / (1.0 + eps);
    let delta0 = if ratio_sup > 0.0 { 1.0 / ratio_sup } else { f64::INFINITY };
    let delta1 = 1.0f64.min((1.0 / bump_coeff).powf(1.0 / eps));
    let interval_factor =
        1.0 - ((0.5 * params.beta + 1.0) / (params.beta + 1.0)).powf(1.0 / params.beta);
    let delta = (delta0 * interval_factor).min(delta1).min(params.horizon);

    let growth_order = model.growth_order(params.m);

    // doubling line search for the weight rate, seeded by the sampled size of
    // the competing terms
    let mut c0_hat = 0.0f64;
    let time_samples: Vec<f64> = (0..16)
        .map(|k| params.horizon * k as f64 / 15.0)
        .collect();
    for i in 0..n_samples {
        let y = math::halton_point(i as u64, sample_box.lo, sample_box.hi, model.dim);
        let wn = math::weight_pow(y, model.dim, growth_order);
        let gen = generator_weight(model, y, growth_order);
        let dw = math::weight_pow_grad(y, model.dim, growth_order);
        let dnorm = math::norm(dw, model.dim);
        c0_hat = c0_hat.max(
            (gen.abs()
                + 2.0f64.powf(alpha) * c.powf(alpha + 1.0) * dnorm.powf(alpha + 1.0)
                + model.lambda(y))
                / wn,
        );
    }
    let l_start = (2.0 * c0_hat).max(1.0);
    let mut weight_rate = l_start;
    let mut found = false;
    let mut worst_node = (0.0, [0.0, 0.0], 0.0);
    for _ in 0..48 {
        let mut ok = true;
        'outer: for &t in &time_samples {
            for i in 0..n_samples {
                let y = math::halton_point(i as u64, sample_box.lo, sample_box.hi, model.dim);
                let lhs = hhat_inequality_lhs(t, y, weight_rate, growth_order, model, params);
                if lhs < 0.0 {
                    ok = false;
                    worst_node = (t, y, lhs);
                    break 'outer;
                }
            }
        }
        if ok {
            found = true;
            break;
        }
        weight_rate *= 2.0;
    }
    if !found {
        return Err(Error::Verification(format!(
            "no exponential weight rate up to {weight_rate:.3e} satisfies the supersolution inequality (worst node {worst_node:?})"
        )));
    }

    Ok(BoundConstants {
        bump_coeff,
        weight_rate,
        delta0,
        delta1,
        delta,
        sup_generator_ratio: ratio_sup,
        growth_order,
        l_search_start: l_start,
        inflation,
        samples: n_samples,
    })
}

/// The model generator applied to `<y>^n`.
fn generator_weight(model: &FactorModel, y: Point, n: f64) -> f64 {
    let g = math::weight_pow_grad(y, model.dim, n);
    let h = math::weight_pow_hessian(y, model.dim, n);
    let b = model.drift(y);
    let s2 = model.vol.sigma_sq_diag();
    let mut v = 0.0;
    for d in 0..model.dim {
        v += 0.5 * s2[d] * h[d][d] + b[d] * g[d];
    }
    v
}

/// Exponential-weight surface `hhat(t, y) = exp(L (T-t)) <y>^n`.
pub fn hhat(
    t: f64,
    y: Point,
    consts: &BoundConstants,
    model: &FactorModel,
    params: &RobustParams,
) -> f64 {
    (consts.weight_rate * (params.horizon - t)).exp()
        * math::weight_pow(y, model.dim, consts.growth_order)
}

/// Left-hand side of the differential inequality the weight must satisfy:
///
/// ```text
/// -d_t hhat - L hhat - 2^alpha C^{alpha+1} |D hhat|^{alpha+1} - lambda
///     + hhat^{beta+1} / (beta eta^beta)  >= 0
/// ```
pub fn hhat_inequality_lhs(
    t: f64,
    y: Point,
    weight_rate: f64,
    growth_order: f64,
    model: &FactorModel,
    params: &RobustParams,
) -> f64 {
    let efac = (weight_rate * (params.horizon - t)).exp();
    let wn = math::weight_pow(y, model.dim, growth_order);
    let h = efac * wn;
    let gen = efac * generator_weight(model, y, growth_order);
    let dnorm = efac * math::norm(math::weight_pow_grad(y, model.dim, growth_order), model.dim);
    let c = model.bounds.c_upper;
    weight_rate * h
        - gen
        - 2.0f64.powf(params.alpha) * c.powf(params.alpha + 1.0) * dnorm.powf(params.alpha + 1.0)
        - model.lambda(y)
        + h.powf(params.beta + 1.0) / (params.beta * model.eta(y).powf(params.beta))
}

fn require_window(t: f64, consts: &BoundConstants, params: &RobustParams) -> Result<()> {
    let horizon = params.horizon;
    if t >= horizon || t < horizon - consts.delta - 1e-12 {
        return Err(Error::domain(
            "t",
            format!(
                "bound surfaces are certified on [T - delta, T) = [{}, {}), got t = {t}",
                horizon - consts.delta,
                horizon
            ),
        ));
    }
    Ok(())
}

/// Lower (subsolution) surface, valid on `[T - delta, T)`.
pub fn subsolution_lower(
    t: f64,
    y: Point,
    consts: &BoundConstants,
    model: &FactorModel,
    params: &RobustParams,
) -> Result<f64> {
    require_window(t, consts, params)?;
    let s = params.horizon - t;
    let eta = model.eta(y);
    Ok(eta * (1.0 - consts.sup_generator_ratio * s) / s.powf(1.0 / params.beta))
}

/// Upper (supersolution) surface, valid on `[T - delta, T)`.
pub fn supersolution_upper(
    t: f64,
    y: Point,
    consts: &BoundConstants,
    model: &FactorModel,
    params: &RobustParams,
) -> Result<f64> {
    require_window(t, consts, params)?;
    let s = params.horizon - t;
    let eta = model.eta(y);
    Ok(eta * (1.0 + consts.bump_coeff * s.powf(params.epsilon)) / s.powf(1.0 / params.beta)
        + hhat(t, y, consts, model, params))
}

/// A node where the sandwich failed; margins are in the rescaled variable
/// (`w` space) and negative by more than the slack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeViolation {
    pub t: f64,
    pub y: Point,
    pub margin: f64,
    pub side: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeSliceSummary {
    pub t: f64,
    pub min_lower_margin: f64,
    pub min_upper_margin: f64,
}

/// Result of comparing a numerical solution against the bound surfaces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub slack: f64,
    /// Certified window `[T - delta, T - tau_min]` actually checked.
    pub window_start: f64,
    pub window_end: f64,
    pub nodes_checked: usize,
    pub min_lower_margin: f64,
    pub min_upper_margin: f64,
    pub violation_count: usize,
    /// At most 1000 entries retained.
    pub violations: Vec<NodeViolation>,
    pub per_time: Vec<TimeSliceSummary>,
    /// Empirical constant in `(T-t)^{1/beta} (value) <= C <y>^n` over the
    /// window (max of the numerical value and the upper surface).
    pub interval_constant: f64,
    /// Whether the lower interval condition
    /// `((beta/2+1)/(beta+1))^{1/beta} eta <= (T-t)^{1/beta} lower` held.
    pub lower_interval_ok: bool,
    pub passed: bool,
}

/// Check `lower <= v <= upper` at every grid node of the certified window,
/// with `slack` (in `w` units) absorbing discretization error. Failures are
/// enumerated, not thrown.
pub fn verify_sandwich(
    sol: &ValueSolution,
    consts: &BoundConstants,
    model: &FactorModel,
    slack: f64,
) -> Result<BoundCertificate> {
    let grid = &sol.grid;
    let params = &sol.params;
    let horizon = params.horizon;
    let window_start = horizon - consts.delta;
    let window_end = grid.t_nodes[grid.n_t() - 1];
    if window_end < window_start {
        return Err(Error::domain("sol", "solution does not reach the certified window"));
    }

    let inv_beta = 1.0 / params.beta;
    let interval_lower_factor =
        ((0.5 * params.beta + 1.0) / (params.beta + 1.0)).powf(inv_beta);

    let mut per_time = Vec::new();
    let mut violations = Vec::new();
    let mut violation_count = 0usize;
    let mut min_lower = f64::INFINITY;
    let mut min_upper = f64::INFINITY;
    let mut nodes_checked = 0usize;
    let mut interval_constant = 0.0f64;
    let mut lower_interval_ok = true;

    for j in 0..grid.n_t() {
        let t = grid.t_nodes[j];
        if t < window_start {
            continue;
        }
        let s = horizon - t;
        let s_eps = s.powf(params.epsilon);
        let s_ib = s.powf(inv_beta);
        let efac = (consts.weight_rate * s).exp();
        let mut slice_lower = f64::INFINITY;
        let mut slice_upper = f64::INFINITY;
        for i0 in 0..grid.n_y(0) {
            for i1 in 0..grid.n_y1_or_1() {
                let y = grid.point(i0, i1);
                let eta = model.eta(y);
                let wn = math::weight_pow(y, model.dim, consts.growth_order);
                // bounds in w space
                let lower_w = eta * (1.0 - consts.sup_generator_ratio * s);
                let upper_w = eta * (1.0 + consts.bump_coeff * s_eps) + s_ib * efac * wn;
                let w_num = sol.w[[j, i0, i1]];
                let lm = w_num - lower_w;
                let um = upper_w - w_num;
                slice_lower = slice_lower.min(lm);
                slice_upper = slice_upper.min(um);
                nodes_checked += 1;
                if lm < -slack {
                    violation_count += 1;
                    if violations.len() < 1000 {
                        violations.push(NodeViolation { t, y, margin: lm, side: "lower".into() });
                    }
                }
                if um < -slack {
                    violation_count += 1;
                    if violations.len() < 1000 {
                        violations.push(NodeViolation { t, y, margin: um, side: "upper".into() });
                    }
                }
                interval_constant = interval_constant.max(upper_w.max(w_num) / wn);
                if lower_w < interval_lower_factor * eta - 1e-12 {
                    lower_interval_ok = false;
                }
            }
        }
        min_lower = min_lower.min(slice_lower);
        min_upper = min_upper.min(slice_upper);
        per_time.push(TimeSliceSummary {
            t,
            min_lower_margin: slice_lower,
            min_upper_margin: slice_upper,
        });
    }

    Ok(BoundCertificate {
        slack,
        window_start,
        window_end,
        nodes_checked,
        min_lower_margin: min_lower,
        min_upper_margin: min_upper,
        violation_count,
        violations,
        per_time,
        interval_constant,
        lower_interval_ok,
        passed: violation_count == 0,
    })
}

/// Fitted decay exponents of `sup_y |w - eta| / <y>^n` and
/// `sup_y |Dw - D eta| / <y>^n` against the time to go, over dyadic times
/// `tau_min * 2^k`. `None` rates flag a degenerate fit (errors at roundoff,
/// e.g. constant models); treat them as "infinitely fast".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateFit {
    pub rate_value: Option<f64>,
    pub rate_gradient: Option<f64>,
    pub degenerate: bool,
    pub times: Vec<f64>,
    pub value_errors: Vec<f64>,
    pub gradient_errors: Vec<f64>,
}

pub fn terminal_rate_fit(sol: &ValueSolution, model: &FactorModel) -> Result<RateFit> {
    let grid = &sol.grid;
    let params = &sol.params;
    let n = model.growth_order(params.m);
    // dyadic times-to-go above the standoff
    let mut indices = Vec::new();
    let mut last = usize::MAX;
    for k in 1..=8 {
        let s = grid.tau_min * (1u64 << k) as f64;
        if s >= params.horizon {
            break;
        }
        let mut best = 0usize;
        let mut dist = f64::INFINITY;
        for j in 0..grid.n_t() {
            let d = (grid.time_to_go(j) - s).abs();
            if d < dist {
                dist = d;
                best = j;
            }
        }
        if best != last {
            indices.push(best);
            last = best;
        }
    }
    if indices.len() < 6 {
        return Err(Error::domain(
            "sol",
            format!("rate fit needs >= 6 distinct near-terminal nodes, found {}", indices.len()),
        ));
    }

    let mut times = Vec::new();
    let mut ev = Vec::new();
    let mut eg = Vec::new();
    for &j in &indices {
        let s = grid.time_to_go(j);
        let mut sup_v = 0.0f64;
        let mut sup_g = 0.0f64;
        for i0 in 0..grid.n_y(0) {
            for i1 in 0..grid.n_y1_or_1() {
                let y = grid.point(i0, i1);
                let wn = math::weight_pow(y, model.dim, n);
                sup_v = sup_v.max((sol.w[[j, i0, i1]] - model.eta(y)).abs() / wn);
                let deta = model.eta_grad(y);
                for d in 0..grid.dim() {
                    sup_g = sup_g.max((sol.dw[d][[j, i0, i1]] - deta[d]).abs() / wn);
                }
            }
        }
        times.push(s);
        ev.push(sup_v);
        eg.push(sup_g);
    }

    let degenerate = ev.iter().all(|&e| e < 1e-12) || eg.iter().all(|&e| e < 1e-12);
    let fit = |errs: &[f64]| -> Option<f64> {
        if errs.iter().any(|&e| e < 1e-300) {
            return None;
        }
        let xs: Vec<f64> = times.iter().map(|s| s.ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        Some(math::linear_fit(&xs, &ys).0)
    };
    let rate_value = if degenerate { None } else { fit(&ev) };
    let rate_gradient = if degenerate { None } else { fit(&eg) };

    Ok(RateFit {
        rate_value,
        rate_gradient,
        degenerate,
        times,
        value_errors: ev,
        gradient_errors: eg,
    })
}
