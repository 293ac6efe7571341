//! Problem parameters and the constants derived from them.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Exponents, horizon, and ambiguity level of the liquidation problem,
/// together with derived constants.
///
/// * `p > 1` — impact exponent: trading at rate `xi` costs `eta |xi|^p`.
/// * `m >= 2` — penalty exponent on the density generator.
/// * `theta >= 0` — ambiguity level; `theta = 0` is the benchmark model.
///
/// Derived: `alpha = 1/(m-1)`, `beta = 1/(p-1)`, `epsilon = 1 - alpha/beta`,
/// and the penalty scale `a = (m-1)^{m-1} / m^m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustParams {
    pub p: f64,
    pub m: f64,
    /// Liquidation horizon T.
    pub horizon: f64,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// `a = (m-1)^{m-1} / m^m`.
    pub penalty_scale: f64,
}

impl RobustParams {
    pub fn new(p: f64, m: f64, horizon: f64, theta: f64) -> Result<Self> {
        if !(p > 1.0) {
            return Err(Error::domain("p", format!("impact exponent must satisfy p > 1, got {p}")));
        }
        if !(m >= 2.0) {
            return Err(Error::domain("m", format!("penalty exponent must satisfy m >= 2, got {m}")));
        }
        if !(horizon > 0.0) {
            return Err(Error::domain("horizon", format!("horizon must be positive, got {horizon}")));
        }
        if !(theta >= 0.0) {
            return Err(Error::domain("theta", format!("ambiguity level must be nonnegative, got {theta}")));
        }
        let alpha = 1.0 / (m - 1.0);
        let beta = 1.0 / (p - 1.0);
        Ok(RobustParams {
            p,
            m,
            horizon,
            theta,
            alpha,
            beta,
            epsilon: 1.0 - alpha / beta,
            penalty_scale: (m - 1.0).powf(m - 1.0) / m.powf(m),
        })
    }

    /// Same exponents and horizon, different ambiguity level.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        RobustParams::new(self.p, self.m, self.horizon, theta)
    }

    /// Whether `beta > 2 alpha` holds. Gradient-based feedback controls and
    /// the asymptotic expansion require it.
    pub fn gradient_regular(&self) -> bool {
        self.beta > 2.0 * self.alpha
    }

    pub fn require_gradient_regular(&self) -> Result<()> {
        if self.gradient_regular() {
            Ok(())
        } else {
            Err(Error::domain(
                "params",
                format!(
                    "operation requires beta > 2 alpha (beta = {}, alpha = {})",
                    self.beta, self.alpha
                ),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn derived_constants_for_p2_m2() {
        let pr = RobustParams::new(2.0, 2.0, 1.0, 0.1).unwrap();
        assert_relative_eq!(pr.alpha, 1.0);
        assert_relative_eq!(pr.beta, 1.0);
        assert_relative_eq!(pr.epsilon, 0.0);
        assert_relative_eq!(pr.penalty_scale, 0.25);
        assert!(!pr.gradient_regular());
    }

    #[test]
    fn derived_constants_for_p2_m4() {
        let pr = RobustParams::new(2.0, 4.0, 1.0, 0.1).unwrap();
        assert_relative_eq!(pr.alpha, 1.0 / 3.0);
        assert_relative_eq!(pr.beta, 1.0);
        assert_relative_eq!(pr.epsilon, 2.0 / 3.0);
        assert_relative_eq!(pr.penalty_scale, 27.0 / 256.0);
        assert!(pr.gradient_regular());
    }

    #[test]
    fn boundary_of_p_is_rejected() {
        let err = RobustParams::new(1.0, 2.0, 1.0, 0.1).unwrap_err();
        match err {
            Error::Domain { field, .. } => assert_eq!(field, "p"),
            other => panic!("expected domain error, got {other}"),
        }
        assert!(RobustParams::new(2.0, 1.5, 1.0, 0.1).is_err());
        assert!(RobustParams::new(2.0, 2.0, 0.0, 0.1).is_err());
        assert!(RobustParams::new(2.0, 2.0, 1.0, -0.1).is_err());
    }

    proptest! {
        // Derived fields are pure functions of (p, m): recomputation is idempotent.
        #[test]
        fn derived_fields_idempotent(p in 1.01f64..6.0, m in 2.0f64..8.0, theta in 0.0f64..2.0) {
            let a = RobustParams::new(p, m, 1.0, theta).unwrap();
            let b = RobustParams::new(a.p, a.m, a.horizon, a.theta).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((a.alpha - 1.0 / (m - 1.0)).abs() < 1e-15);
            prop_assert!((a.beta - 1.0 / (p - 1.0)).abs() < 1e-15);
            prop_assert!((a.epsilon - (1.0 - a.alpha / a.beta)).abs() < 1e-15);
        }
    }
}
