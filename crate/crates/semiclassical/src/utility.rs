//! The HARA family of utility functions.
//!
//! Four members are supported: general HARA, CRRA (power), CARA
//! (exponential), and logarithmic utility. Each carries a constant `kappa`
//! that parameterizes the rest of the pipeline; everything downstream of the
//! utility choice depends on the utility only through `kappa` and, at policy
//! time, the absolute risk aversion at current wealth.

use crate::{Error, Result};

/// A member of the HARA utility family.
///
/// Parameter constraints are enforced by the constructors:
/// HARA requires `b > 0` and `gamma` not in {0, 1}; CRRA requires
/// `gamma > 0`, `gamma != 1`; CARA requires `gamma > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Utility {
    /// U(v) = (γ/(1−γ)) (a + (b/γ) v)^{1−γ} on {v : a + (b/γ)v > 0}.
    Hara { a: f64, b: f64, gamma: f64 },
    /// U(v) = v^{1−γ}/(1−γ) on v > 0.
    Crra { gamma: f64 },
    /// U(v) = −e^{−γv}/γ on all of ℝ.
    Cara { gamma: f64 },
    /// U(v) = log v on v > 0.
    Log,
}

impl Utility {
    pub fn hara(a: f64, b: f64, gamma: f64) -> Result<Self> {
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::Domain(format!("HARA requires b > 0, got b = {b}")));
        }
        if gamma == 0.0 || gamma == 1.0 || !gamma.is_finite() {
            return Err(Error::Domain(format!(
                "HARA requires gamma outside {{0, 1}}, got gamma = {gamma}"
            )));
        }
        if !a.is_finite() {
            return Err(Error::Domain(format!("HARA requires finite a, got {a}")));
        }
        Ok(Utility::Hara { a, b, gamma })
    }

    pub fn crra(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || gamma == 1.0 || !gamma.is_finite() {
            return Err(Error::Domain(format!(
                "CRRA requires gamma > 0 and gamma != 1, got gamma = {gamma}"
            )));
        }
        Ok(Utility::Crra { gamma })
    }

    pub fn cara(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!(
                "CARA requires gamma > 0, got gamma = {gamma}"
            )));
        }
        Ok(Utility::Cara { gamma })
    }

    pub fn log() -> Self {
        Utility::Log
    }

    /// The CRRA instance written as a HARA instance: CRRA(γ) has the same
    /// U and derivatives as HARA(a=0, b=γ^{−γ/(1−γ)}, γ) on v > 0.
    pub fn crra_as_hara(gamma: f64) -> Result<Self> {
        Self::crra(gamma)?;
        let b = gamma.powf(-gamma / (1.0 - gamma));
        Self::hara(0.0, b, gamma)
    }

    /// Checks `v` against the utility's wealth domain.
    fn check_domain(&self, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::Domain(format!("wealth must be finite, got {v}")));
        }
        let ok = match *self {
            Utility::Hara { a, b, gamma } => a + (b / gamma) * v > 0.0,
            Utility::Crra { .. } | Utility::Log => v > 0.0,
            Utility::Cara { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "wealth v = {v} outside the domain of {self:?}"
            )))
        }
    }

    /// U(v).
    pub fn evaluate(&self, v: f64) -> Result<f64> {
        self.check_domain(v)?;
        Ok(match *self {
            Utility::Hara { a, b, gamma } => {
                gamma / (1.0 - gamma) * (a + b / gamma * v).powf(1.0 - gamma)
            }
            Utility::Crra { gamma } => v.powf(1.0 - gamma) / (1.0 - gamma),
            Utility::Cara { gamma } => -(-gamma * v).exp() / gamma,
            Utility::Log => v.ln(),
        })
    }

    /// U′(v).
    pub fn derivative(&self, v: f64) -> Result<f64> {
        self.check_domain(v)?;
        Ok(match *self {
            Utility::Hara { a, b, gamma } => b * (a + b / gamma * v).powf(-gamma),
            Utility::Crra { gamma } => v.powf(-gamma),
            Utility::Cara { gamma } => (-gamma * v).exp(),
            Utility::Log => 1.0 / v,
        })
    }

    /// U″(v).
    pub fn second_derivative(&self, v: f64) -> Result<f64> {
        self.check_domain(v)?;
        Ok(match *self {
            Utility::Hara { a, b, gamma } => -b * b * (a + b / gamma * v).powf(-gamma - 1.0),
            Utility::Crra { gamma } => -gamma * v.powf(-gamma - 1.0),
            Utility::Cara { gamma } => -gamma * (-gamma * v).exp(),
            Utility::Log => -1.0 / (v * v),
        })
    }

    /// Absolute risk aversion A_U(v) = −U″(v)/U′(v).
    ///
    /// For CARA this is the constant γ, independent of wealth.
    pub fn absolute_risk_aversion(&self, v: f64) -> Result<f64> {
        self.check_domain(v)?;
        Ok(match *self {
            Utility::Hara { a, b, gamma } => b / (a + b / gamma * v),
            Utility::Crra { gamma } => gamma / v,
            Utility::Cara { gamma } => gamma,
            Utility::Log => 1.0 / v,
        })
    }

    /// Relative risk aversion R_U(v) = v·A_U(v).
    pub fn relative_risk_aversion(&self, v: f64) -> Result<f64> {
        Ok(v * self.absolute_risk_aversion(v)?)
    }

    /// The constant ratio −U′(v)²/(U″(v)·U(v)) that classifies the family:
    /// (1−γ)/γ for HARA and CRRA, −1 for CARA, and the table value 0 for log
    /// utility (the CRRA limit γ → 1).
    pub fn kappa(&self) -> f64 {
        match *self {
            Utility::Hara { gamma, .. } | Utility::Crra { gamma } => (1.0 - gamma) / gamma,
            Utility::Cara { .. } => -1.0,
            Utility::Log => 0.0,
        }
    }
}
