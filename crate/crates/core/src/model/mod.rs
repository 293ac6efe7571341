//! Factor models: coefficient fields, declared growth constants, and sampled
//! verification of the standing assumptions.

mod assumptions;
mod fields;

pub use assumptions::{validate_assumptions, AssumptionCheck, AssumptionReport};
pub use fields::{DriftField, ScalarField, VolField};

use crate::error::{Error, Result};
use crate::math::Point;
use serde::{Deserialize, Serialize};

/// Declared growth constants of the cost coefficients: the bounds
/// `c_lower <y>^{(1-p k0) m} <= eta <= c_upper <y>^{(1-k0) m}` and
/// `lambda <= c_upper <y>^{(1-k0) m}` are checked against samples, and the
/// growth order `n = (1 - k0) m` feeds the supersolution weight.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthBounds {
    pub c_lower: f64,
    pub c_upper: f64,
    pub k0: f64,
}

/// Diffusion factor model driving trading costs.
///
/// `eta` is the inverse market depth (instantaneous impact), `lambda` the
/// market risk weight. Both are fields over the factor `Y` with dynamics
/// `dY = b(Y) dt + sigma(Y) dW`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorModel {
    pub id: String,
    pub dim: usize,
    pub drift: DriftField,
    pub vol: VolField,
    pub eta: ScalarField,
    pub lambda: ScalarField,
    pub bounds: GrowthBounds,
    /// Model declares bounded coefficients (`c_lower <= eta <= c_upper`,
    /// `lambda` bounded with bounded gradient).
    pub declares_bounded: bool,
    /// Model declares `sigma sigma^*` uniformly positive definite and
    /// `b, sigma` continuously differentiable.
    pub declares_elliptic: bool,
}

impl FactorModel {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > 2 {
            return Err(Error::domain("dim", format!("spatial dimension must be 1 or 2, got {}", self.dim)));
        }
        if self.eta.max_index() >= self.dim || self.lambda.max_index() >= self.dim {
            return Err(Error::domain("model", "coefficient field references a coordinate beyond the model dimension"));
        }
        if !(self.bounds.k0 > 0.0 && self.bounds.k0 <= 1.0) {
            return Err(Error::domain("k0", format!("k0 must lie in (0, 1], got {}", self.bounds.k0)));
        }
        if !(self.bounds.c_lower > 0.0 && self.bounds.c_upper >= self.bounds.c_lower) {
            return Err(Error::domain("bounds", "need 0 < c_lower <= c_upper"));
        }
        Ok(())
    }

    pub fn eta(&self, y: Point) -> f64 {
        self.eta.eval(y)
    }

    pub fn eta_grad(&self, y: Point) -> Point {
        self.eta.grad(y)
    }

    pub fn lambda(&self, y: Point) -> f64 {
        self.lambda.eval(y)
    }

    pub fn drift(&self, y: Point) -> Point {
        self.drift.eval(y)
    }

    /// `L phi = 1/2 tr(sigma sigma^* D^2 phi) + <b, D phi>` applied to `eta`.
    pub fn generator_eta(&self, y: Point) -> f64 {
        let h = self.eta.hessian(y);
        let g = self.eta.grad(y);
        let b = self.drift.eval(y);
        let s2 = self.vol.sigma_sq_diag();
        let mut v = 0.0;
        for d in 0..self.dim {
            v += 0.5 * s2[d] * h[d][d] + b[d] * g[d];
        }
        v
    }

    /// Growth order `n = (1 - k0) m` of the polynomial weight. Stored per
    /// penalty exponent since `m` lives in the run parameters.
    pub fn growth_order(&self, m: f64) -> f64 {
        (1.0 - self.bounds.k0) * m
    }

    /// Constant-coefficient model; the workhorse for closed-form oracles.
    pub fn constant(dim: usize, eta0: f64, lambda0: f64, vol: f64) -> Self {
        FactorModel {
            id: "constant".into(),
            dim,
            drift: DriftField::zero(),
            vol: VolField::diagonal([vol, vol]),
            eta: ScalarField::Constant { value: eta0 },
            lambda: ScalarField::Constant { value: lambda0 },
            bounds: GrowthBounds {
                c_lower: eta0 * 0.5,
                c_upper: (2.0 * eta0).max(2.0 * lambda0).max(2.0 * vol).max(1.0),
                k0: 1.0,
            },
            declares_bounded: true,
            declares_elliptic: vol != 0.0,
        }
    }

    /// Two-factor model: a mean-reverting factor drives liquidity through
    /// `eta(y) = tanh(-y_1) + 2`, an arithmetic Brownian factor drives the
    /// risk weight `lambda(y) = base + amp tanh(y_2)` (a bounded squared
    /// volatility). `mu` and `sigma` are the drift and volatility of the
    /// second factor.
    pub fn ou_liquidity(mu: f64, sigma: f64, lambda_base: f64, lambda_amp: f64) -> Result<Self> {
        if lambda_amp.abs() > lambda_base {
            return Err(Error::domain(
                "lambda_amp",
                format!("risk weight must stay nonnegative and bounded: need |amp| <= base, got base {lambda_base}, amp {lambda_amp}"),
            ));
        }
        let model = FactorModel {
            id: "ou-liquidity".into(),
            dim: 2,
            drift: DriftField {
                matrix: [[-1.0, 0.0], [0.0, 0.0]],
                shift: [0.0, mu],
            },
            vol: VolField::diagonal([1.0, sigma]),
            eta: ScalarField::TanhLiquidity { index: 0, scale: 1.0, offset: 2.0 },
            lambda: ScalarField::TanhRisk { index: 1, base: lambda_base, amp: lambda_amp },
            bounds: GrowthBounds {
                c_lower: 1.0,
                c_upper: 3.0_f64.max(1.0 + mu.abs()).max(sigma.abs() * 1.5).max(lambda_base + lambda_amp.abs()),
                k0: 1.0,
            },
            declares_bounded: true,
            declares_elliptic: sigma != 0.0,
        };
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ou_liquidity_at_origin() {
        let model = FactorModel::ou_liquidity(0.0, 1.0, 0.5, 0.3).unwrap();
        assert_relative_eq!(model.eta([0.0, 0.0]), 2.0);
        assert_relative_eq!(model.lambda([0.0, 0.0]), 0.5);
    }

    #[test]
    fn ou_liquidity_drift() {
        let model = FactorModel::ou_liquidity(0.7, 1.0, 0.5, 0.3).unwrap();
        let b = model.drift([2.0, 5.0]);
        assert_relative_eq!(b[0], -2.0);
        assert_relative_eq!(b[1], 0.7);
    }

    #[test]
    fn eta_range_is_one_to_three() {
        let model = FactorModel::ou_liquidity(0.0, 1.0, 0.5, 0.3).unwrap();
        // dense sweep over the first factor; tanh is monotone so the extremes
        // bound the range
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..=4000 {
            let y0 = -20.0 + 0.01 * i as f64;
            let v = model.eta([y0, 0.0]);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!((1.0..1.001).contains(&lo));
        assert!(hi <= 3.0 && hi > 2.999);
    }

    #[test]
    fn unbounded_risk_spec_is_rejected() {
        assert!(FactorModel::ou_liquidity(0.0, 1.0, 0.3, 0.5).is_err());
    }

    #[test]
    fn generator_of_liquidity_field() {
        // eta = tanh(-y1)+2 under OU drift -y1 and unit vol:
        // L eta = 1/2 * eta'' + (-y1) * eta'
        //       = sech^2(y1) tanh(y1) + y1 sech^2(y1)
        let model = FactorModel::ou_liquidity(0.0, 1.0, 0.5, 0.3).unwrap();
        let y = [0.8, -0.3];
        let sech2 = 1.0 / 0.8f64.cosh().powi(2);
        let expect = sech2 * 0.8f64.tanh() + 0.8 * sech2;
        assert_relative_eq!(model.generator_eta(y), expect, max_relative = 1e-12);
    }
}
