//! Sampled verification of the standing assumptions.
//!
//! The assumptions are global statements over `R^d`; we certify them
//! empirically on quasi-random points in a user box and report the worst
//! margin per inequality. A failed check carries the witness point.

use super::FactorModel;
use crate::error::{Error, Result};
use crate::grid::SpaceBox;
use crate::math::{self, Point};
use crate::par;
use crate::params::RobustParams;
use serde::{Deserialize, Serialize};

/// Outcome of one inequality family. `worst_margin` is the minimum over
/// samples of (allowed - actual); nonnegative means the check passed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub id: String,
    pub samples: usize,
    pub worst_margin: f64,
    pub passed: bool,
    pub witness: Option<Point>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, id: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }
}

/// Per-sample margins for every inequality; reduced over samples afterwards.
struct SampleMargins {
    /// (check index, margin) pairs in fixed order.
    margins: Vec<f64>,
}

struct CheckDef {
    id: &'static str,
}

/// Evaluate every declared assumption at `n_samples` quasi-random points of
/// `sample_box` and report worst margins. Violations are reported, not
/// thrown. Declared gradients of `eta` and `lambda` are also compared against
/// central finite differences at the same points (step 1e-5, relative
/// tolerance 1e-6).
pub fn validate_assumptions(
    model: &FactorModel,
    params: &RobustParams,
    sample_box: &SpaceBox,
    n_samples: usize,
) -> Result<AssumptionReport> {
    model.validate()?;
    if n_samples == 0 {
        return Err(Error::domain("n_samples", "need at least one sample point"));
    }
    sample_box.validate(model.dim)?;

    let mut defs = vec![
        CheckDef { id: "L.1-drift-lipschitz" },
        CheckDef { id: "L.1-drift-growth" },
        CheckDef { id: "L.2-vol-lipschitz" },
        CheckDef { id: "L.3-vol-bounded" },
        CheckDef { id: "F.1-eta-lower" },
        CheckDef { id: "F.1-eta-upper" },
        CheckDef { id: "F.1-lambda-growth" },
        CheckDef { id: "F.2-generator-ratio" },
        CheckDef { id: "F.2-gradient-ratio" },
        CheckDef { id: "grad-consistency" },
    ];
    if model.declares_bounded {
        defs.push(CheckDef { id: "F.3-eta-bounded" });
        defs.push(CheckDef { id: "F.3-lambda-bounded" });
    }
    if model.declares_elliptic {
        defs.push(CheckDef { id: "L.4-uniform-ellipticity" });
    }
    let n_checks = defs.len();

    let dim = model.dim;
    let lo = sample_box.lo;
    let hi = sample_box.hi;
    let c_up = model.bounds.c_upper;
    let c_lo = model.bounds.c_lower;
    let m = params.m;
    let n_growth = model.growth_order(m);
    let eta_lower_order = (1.0 - params.p * model.bounds.k0) * m;
    let alpha = params.alpha;

    let per_sample: Vec<SampleMargins> = par::map_indexed(n_samples, |i| {
        let y = math::halton_point(i as u64, lo, hi, dim);
        // a second, decorrelated point for the Lipschitz pair checks
        let y2 = math::halton_point((i + n_samples) as u64, lo, hi, dim);
        let mut margins = Vec::with_capacity(n_checks);

        let b = model.drift.eval(y);
        let b2 = model.drift.eval(y2);
        let dy = math::norm([y[0] - y2[0], y[1] - y2[1]], dim);
        let db = math::norm([b[0] - b2[0], b[1] - b2[1]], dim);
        // L.1: |b(x)-b(y)| <= C |x-y| and |b(y)| <= C (1 + |y|)
        margins.push(c_up * dy - db);
        margins.push(c_up * (1.0 + math::norm(y, dim)) - math::norm(b, dim));
        // L.2: registry vol is constant, so the Lipschitz increment is zero
        margins.push(c_up * dy - 0.0);
        // L.3
        margins.push(c_up - model.vol.frobenius(dim));

        let w = math::weight(y, dim);
        let eta = model.eta(y);
        let lam = model.lambda(y);
        // F.1
        margins.push(eta - c_lo * w.powf(eta_lower_order));
        margins.push(c_up * w.powf(n_growth) - eta);
        margins.push(c_up * w.powf(n_growth) - lam);
        // F.2: |L eta / eta| <= C and |D eta|^{alpha+1} / eta <= C
        let gen_ratio = if eta > 0.0 {
            (model.generator_eta(y) / eta).abs()
        } else {
            f64::INFINITY
        };
        margins.push(c_up - gen_ratio);
        let dgrad = math::norm(model.eta_grad(y), dim);
        let grad_ratio = if eta > 0.0 {
            dgrad.powf(alpha + 1.0) / eta
        } else {
            f64::INFINITY
        };
        margins.push(c_up - grad_ratio);

        // declared gradients of eta and lambda vs central differences
        let mut worst_rel = 0.0f64;
        for (field, grad) in [
            (&model.eta, model.eta.grad(y)),
            (&model.lambda, model.lambda.grad(y)),
        ] {
            for d in 0..dim {
                let h = 1e-5;
                let mut yp = y;
                let mut ym = y;
                yp[d] += h;
                ym[d] -= h;
                let fd = (field.eval(yp) - field.eval(ym)) / (2.0 * h);
                let scale = grad[d].abs().max(fd.abs()).max(1e-3);
                worst_rel = worst_rel.max((grad[d] - fd).abs() / scale);
            }
        }
        margins.push(1e-6 - worst_rel);

        if model.declares_bounded {
            margins.push((eta - c_lo).min(c_up - eta));
            let dlam = math::norm(model.lambda.grad(y), dim);
            margins.push((c_up - lam).min(c_up - dlam).min(lam));
        }
        if model.declares_elliptic {
            // diagonal sigma: smallest eigenvalue of sigma sigma^*
            let s2 = model.vol.sigma_sq_diag();
            let min_eig = (0..dim).map(|d| s2[d]).fold(f64::INFINITY, f64::min);
            margins.push(min_eig);
        }

        SampleMargins { margins }
    });

    // deterministic reduction in sample order
    let mut worst = vec![f64::INFINITY; n_checks];
    let mut witness: Vec<Option<Point>> = vec![None; n_checks];
    for (i, s) in per_sample.iter().enumerate() {
        for (c, &mg) in s.margins.iter().enumerate() {
            if mg < worst[c] {
                worst[c] = mg;
                witness[c] = Some(math::halton_point(i as u64, lo, hi, dim));
            }
        }
    }

    let checks = defs
        .into_iter()
        .enumerate()
        .map(|(c, def)| {
            let passed = worst[c] >= 0.0;
            AssumptionCheck {
                id: def.id.to_string(),
                samples: n_samples,
                worst_margin: worst[c],
                passed,
                witness: if passed { None } else { witness[c] },
            }
        })
        .collect();

    Ok(AssumptionReport { checks })
}
