//! The Hamiltonian H(x, p) driving the characteristic system, its first and
//! second derivatives, and the running integrand whose negative time integral
//! is the leading value exponent S⁰.
//!
//! For κ ≠ −1 the Hamiltonian is
//!
//!   H(x, p) = (1/2γ) pᵀC(x)p + (1/γ) pᵀa(x) + V(x),   γ = 1/(κ+1),
//!
//! a particle of mass γ in the potential −V. Internally every coefficient is
//! written via κ+1 = 1/γ, which stays finite across the whole family; the
//! exponential-utility case κ = −1 (infinite mass, frozen state) is kept as
//! an explicit branch so its degenerate dynamics are visible at the call
//! site rather than emerging from 0·p arithmetic.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::model::{self, Model};
use crate::Result;

/// A model paired with the utility constant κ; everything the characteristic
/// integrator needs to evaluate H and its derivatives.
#[derive(Clone)]
pub struct HamiltonianSystem {
    model: Arc<dyn Model>,
    kappa: f64,
}

/// Second derivatives of H at a phase point. `hxp` has entry
/// (i, j) = ∂²H/∂xⁱ∂pʲ; `hpx` is its transpose.
#[derive(Debug, Clone)]
pub struct SecondDerivatives {
    pub hxx: DMatrix<f64>,
    pub hxp: DMatrix<f64>,
    pub hpp: DMatrix<f64>,
}

impl HamiltonianSystem {
    pub fn new(model: Arc<dyn Model>, kappa: f64) -> Self {
        HamiltonianSystem { model, kappa }
    }

    pub fn model(&self) -> &dyn Model {
        self.model.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// The particle mass γ = 1/(κ+1). Infinite in the frozen-state branch
    /// (κ = −1), where it never multiplies anything.
    pub fn mass(&self) -> f64 {
        1.0 / (self.kappa + 1.0)
    }

    /// Whether this system is the κ = −1 (exponential utility) degeneration:
    /// frozen state, momentum growing linearly in the potential gradient.
    pub fn cara_mode(&self) -> bool {
        self.kappa == -1.0
    }

    fn kp1(&self) -> f64 {
        self.kappa + 1.0
    }

    /// H(x, p). In the frozen-state branch this is V(x) alone.
    pub fn h_value(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<f64> {
        let v = model::potential(self.model(), self.kappa, x)?;
        if self.cara_mode() {
            return Ok(v);
        }
        let c = self.model.covariance(x)?;
        let a = self.model.drift(x)?;
        let kp1 = self.kp1();
        Ok(0.5 * kp1 * (&c * p).dot(p) + kp1 * p.dot(&a) + v)
    }

    /// ∇ₚH = (1/γ)(C(x)p + a(x)); zero in the frozen-state branch.
    pub fn dh_dp(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
        if self.cara_mode() {
            self.model.domain().check(x)?;
            return Ok(DVector::zeros(self.dim()));
        }
        let c = self.model.covariance(x)?;
        let a = self.model.drift(x)?;
        Ok(self.kp1() * (c * p + a))
    }

    /// ∇ₓH with components (1/2γ)pᵀ(∂C/∂xⁱ)p + (1/γ)pᵀ(∂a/∂xⁱ) + ∂V/∂xⁱ.
    /// In the frozen-state branch this reduces to ∇V(x).
    pub fn dh_dx(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
        let mut grad = model::potential_gradient(self.model(), self.kappa, x)?;
        if self.cara_mode() {
            return Ok(grad);
        }
        let kp1 = self.kp1();
        let jt_p = self.model.drift_jacobian(x)?.transpose() * p;
        for i in 0..self.dim() {
            let dc = self.model.covariance_derivative(x, i)?;
            grad[i] += 0.5 * kp1 * (&dc * p).dot(p) + kp1 * jt_p[i];
        }
        Ok(grad)
    }

    /// L(x, p) = (1/2γ)pᵀC(x)p − V(x); S⁰ = −∫ₜᵀ L ds along a
    /// characteristic. −V(x) in the frozen-state branch.
    pub fn s0_integrand(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<f64> {
        let v = model::potential(self.model(), self.kappa, x)?;
        if self.cara_mode() {
            return Ok(-v);
        }
        let c = self.model.covariance(x)?;
        Ok(0.5 * self.kp1() * (&c * p).dot(p) - v)
    }

    /// ∂²H/∂x∂p at (x, p), exact for any p since H is quadratic in p:
    /// entry (i, j) = (κ+1)[((∂C/∂xⁱ)p)ⱼ + ∂aⱼ/∂xⁱ].
    pub fn mixed_second(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let kp1 = self.kp1();
        let mut hxp = self.model.drift_jacobian(x)?.transpose();
        for i in 0..n {
            let dc = self.model.covariance_derivative(x, i)?;
            let row = dc * p;
            for j in 0..n {
                hxp[(i, j)] += row[j];
            }
        }
        Ok(kp1 * hxp)
    }

    /// Second derivatives {Hxx, Hxp, Hpp}. Hpp = (κ+1)C(x) and Hxp are
    /// analytic for every p; Hxx is ∇²V(x) at p = 0 and falls back to
    /// central finite differences of ∇ₓH for p ≠ 0 (a test-only path).
    pub fn second_derivatives(
        &self,
        x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> Result<SecondDerivatives> {
        let n = self.dim();
        let hpp = if self.cara_mode() {
            DMatrix::zeros(n, n)
        } else {
            self.kp1() * self.model.covariance(x)?
        };
        let hxp = if self.cara_mode() {
            DMatrix::zeros(n, n)
        } else {
            self.mixed_second(x, p)?
        };
        let hxx = if p.iter().all(|&pi| pi == 0.0) {
            model::potential_hessian(self.model(), self.kappa, x)?
        } else {
            let mut hxx = DMatrix::zeros(n, n);
            for j in 0..n {
                let step = 1e-6 * (1.0 + x[j].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += step;
                xm[j] -= step;
                let col = (self.dh_dx(&xp, p)? - self.dh_dx(&xm, p)?) / (2.0 * step);
                hxx.set_column(j, &col);
            }
            let hxx_t = hxx.transpose();
            hxx = (hxx + hxx_t) * 0.5;
            hxx
        };
        Ok(SecondDerivatives { hxx, hxp, hpp })
    }
}
