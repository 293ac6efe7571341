//! Coefficient fields with exact derivatives.
//!
//! Fields form a closed registry (constants, coordinates, tanh shapes, plus
//! sums/products/scalings) rather than parsed expressions, so gradients and
//! Hessians are exact and the assumption checker stays honest.

use crate::math::Point;
use serde::{Deserialize, Serialize};

/// Scalar coefficient field `R^d -> R` with exact gradient and Hessian.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarField {
    Constant { value: f64 },
    /// `y[index]` itself; handy for deliberately invalid models in tests.
    Coordinate { index: usize },
    /// `scale * tanh(-y[index]) + offset` — liquidity fluctuating around a
    /// stationary level, bounded in `(offset - scale, offset + scale)`.
    TanhLiquidity { index: usize, scale: f64, offset: f64 },
    /// `base + amp * tanh(y[index])` — bounded risk weight with bounded
    /// derivative (a squared volatility shape).
    TanhRisk { index: usize, base: f64, amp: f64 },
    Sum { terms: Vec<ScalarField> },
    Scaled { factor: f64, inner: Box<ScalarField> },
    Product { left: Box<ScalarField>, right: Box<ScalarField> },
}

impl ScalarField {
    pub fn eval(&self, y: Point) -> f64 {
        match self {
            ScalarField::Constant { value } => *value,
            ScalarField::Coordinate { index } => y[*index],
            ScalarField::TanhLiquidity { index, scale, offset } => scale * (-y[*index]).tanh() + offset,
            ScalarField::TanhRisk { index, base, amp } => base + amp * y[*index].tanh(),
            ScalarField::Sum { terms } => terms.iter().map(|t| t.eval(y)).sum(),
            ScalarField::Scaled { factor, inner } => factor * inner.eval(y),
            ScalarField::Product { left, right } => left.eval(y) * right.eval(y),
        }
    }

    pub fn grad(&self, y: Point) -> Point {
        match self {
            ScalarField::Constant { .. } => [0.0, 0.0],
            ScalarField::Coordinate { index } => {
                let mut g = [0.0, 0.0];
                g[*index] = 1.0;
                g
            }
            ScalarField::TanhLiquidity { index, scale, .. } => {
                let mut g = [0.0, 0.0];
                let s = (-y[*index]).cosh();
                g[*index] = -scale / (s * s);
                g
            }
            ScalarField::TanhRisk { index, amp, .. } => {
                let mut g = [0.0, 0.0];
                let c = y[*index].cosh();
                g[*index] = amp / (c * c);
                g
            }
            ScalarField::Sum { terms } => {
                let mut g = [0.0, 0.0];
                for t in terms {
                    let tg = t.grad(y);
                    g[0] += tg[0];
                    g[1] += tg[1];
                }
                g
            }
            ScalarField::Scaled { factor, inner } => {
                let g = inner.grad(y);
                [factor * g[0], factor * g[1]]
            }
            ScalarField::Product { left, right } => {
                let (lv, rv) = (left.eval(y), right.eval(y));
                let (lg, rg) = (left.grad(y), right.grad(y));
                [lg[0] * rv + lv * rg[0], lg[1] * rv + lv * rg[1]]
            }
        }
    }

    pub fn hessian(&self, y: Point) -> [[f64; 2]; 2] {
        match self {
            ScalarField::Constant { .. } | ScalarField::Coordinate { .. } => [[0.0; 2]; 2],
            ScalarField::TanhLiquidity { index, scale, .. } => {
                // d^2/dy^2 [scale*tanh(-y)] = -2 scale sech^2(y) tanh(y)... with y := y[index]
                let i = *index;
                let t = y[i].tanh();
                let c = y[i].cosh();
                let sech2 = 1.0 / (c * c);
                let mut h = [[0.0; 2]; 2];
                // f(y) = scale*tanh(-y_i): f' = -scale*sech^2(y_i), f'' = 2*scale*sech^2(y_i)*tanh(y_i)
                h[i][i] = 2.0 * scale * sech2 * t;
                h
            }
            ScalarField::TanhRisk { index, amp, .. } => {
                let i = *index;
                let t = y[i].tanh();
                let c = y[i].cosh();
                let sech2 = 1.0 / (c * c);
                let mut h = [[0.0; 2]; 2];
                h[i][i] = -2.0 * amp * sech2 * t;
                h
            }
            ScalarField::Sum { terms } => {
                let mut h = [[0.0; 2]; 2];
                for t in terms {
                    let th = t.hessian(y);
                    for i in 0..2 {
                        for j in 0..2 {
                            h[i][j] += th[i][j];
                        }
                    }
                }
                h
            }
            ScalarField::Scaled { factor, inner } => {
                let mut h = inner.hessian(y);
                for row in h.iter_mut() {
                    for v in row.iter_mut() {
                        *v *= factor;
                    }
                }
                h
            }
            ScalarField::Product { left, right } => {
                let (lv, rv) = (left.eval(y), right.eval(y));
                let (lg, rg) = (left.grad(y), right.grad(y));
                let (lh, rh) = (left.hessian(y), right.hessian(y));
                let mut h = [[0.0; 2]; 2];
                for i in 0..2 {
                    for j in 0..2 {
                        h[i][j] = lh[i][j] * rv + lg[i] * rg[j] + lg[j] * rg[i] + lv * rh[i][j];
                    }
                }
                h
            }
        }
    }

    /// Highest coordinate index referenced, for dimension validation.
    pub fn max_index(&self) -> usize {
        match self {
            ScalarField::Constant { .. } => 0,
            ScalarField::Coordinate { index }
            | ScalarField::TanhLiquidity { index, .. }
            | ScalarField::TanhRisk { index, .. } => *index,
            ScalarField::Sum { terms } => terms.iter().map(|t| t.max_index()).max().unwrap_or(0),
            ScalarField::Scaled { inner, .. } => inner.max_index(),
            ScalarField::Product { left, right } => left.max_index().max(right.max_index()),
        }
    }
}

/// Drift field `b(y) = matrix y + shift`; covers constants, Ornstein-Uhlenbeck
/// reversion, and cross-coordinate coupling. The Jacobian is the matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftField {
    pub matrix: [[f64; 2]; 2],
    pub shift: [f64; 2],
}

impl DriftField {
    pub fn zero() -> Self {
        DriftField { matrix: [[0.0; 2]; 2], shift: [0.0; 2] }
    }

    /// Mean-reverting drift `b_i(y) = -rate_i * y_i`.
    pub fn mean_reverting(rates: [f64; 2]) -> Self {
        DriftField {
            matrix: [[-rates[0], 0.0], [0.0, -rates[1]]],
            shift: [0.0; 2],
        }
    }

    pub fn eval(&self, y: Point) -> Point {
        [
            self.matrix[0][0] * y[0] + self.matrix[0][1] * y[1] + self.shift[0],
            self.matrix[1][0] * y[0] + self.matrix[1][1] * y[1] + self.shift[1],
        ]
    }

    pub fn jacobian(&self) -> [[f64; 2]; 2] {
        self.matrix
    }
}

/// Volatility field. The registry keeps it constant and diagonal, which makes
/// `sigma sigma^*` diagonal; the 2-d splitting solver relies on that.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolField {
    pub diag: [f64; 2],
}

impl VolField {
    pub fn diagonal(diag: [f64; 2]) -> Self {
        VolField { diag }
    }

    /// `sigma^* q` (here `sigma` is diagonal so this is componentwise).
    pub fn sigma_t(&self, q: Point) -> Point {
        [self.diag[0] * q[0], self.diag[1] * q[1]]
    }

    /// Diagonal of `sigma sigma^*`.
    pub fn sigma_sq_diag(&self) -> [f64; 2] {
        [self.diag[0] * self.diag[0], self.diag[1] * self.diag[1]]
    }

    /// Frobenius norm of `sigma`, restricted to the model dimension.
    pub fn frobenius(&self, dim: usize) -> f64 {
        crate::math::norm(self.diag, dim)
    }
}
