//! Closed-form reference solutions for the three exactly solvable families:
//! lognormal (Merton), multivariate mean-reverting (OU), and the κ = −1
//! exponential-utility expansion. The solver pipeline never calls these;
//! they exist so tests and the `oracle-compare` subcommand can hold the
//! numerics against independent answers.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::leapfrog::PhasePoint;
use crate::model::{self, Model};
use crate::Result;

// ===== Lognormal =====

/// S⁰(t, x) = (κ/2) μᵀC⁻¹μ (T−t) for lognormal dynamics: constant in x,
/// and every higher-order term vanishes.
pub fn lognormal_s0(
    mu: &DVector<f64>,
    c: &DMatrix<f64>,
    kappa: f64,
    t: f64,
    horizon: f64,
) -> Result<f64> {
    let chol = c.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        context: "lognormal covariance".into(),
    })?;
    let w = chol.solve(mu);
    Ok(0.5 * kappa * mu.dot(&w) * (horizon - t))
}

/// φ*ᵢ = (1/A_U) (C⁻¹μ)ᵢ / xⁱ: the optimal fractions are price-weighted
/// copies of the constant myopic allocation, with no hedging part.
pub fn lognormal_policy(
    mu: &DVector<f64>,
    c: &DMatrix<f64>,
    a_u: f64,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    if a_u <= 0.0 {
        return Err(Error::Domain(format!(
            "absolute risk aversion must be positive, got {a_u}"
        )));
    }
    let chol = c.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        context: "lognormal covariance".into(),
    })?;
    let w = chol.solve(mu);
    Ok(DVector::from_iterator(
        x.len(),
        w.iter().zip(x.iter()).map(|(wi, xi)| wi / (a_u * xi)),
    ))
}

// ===== Mean-reverting (OU) =====

/// The linear characteristic system for drift Λ(μ̄−x) with constant
/// covariance: u̇ = Au + m for the stacked phase vector u = (x; p), with
///
///   A = ( −γ⁻¹Λ    γ⁻¹C  )        m = ( γ⁻¹Λμ̄    )
///       ( −κΛC⁻¹Λ  γ⁻¹Λ  ),           ( κΛC⁻¹Λμ̄ ),
///
/// γ⁻¹ = κ+1. All queries reduce to exponentials of A or of its (2n+1)
/// augmentation Ã = (A, m; 0, 0), which absorbs the affine part and stays
/// well defined when A is singular (zero mean-reversion speeds included).
#[derive(Debug, Clone)]
pub struct OUOracle {
    lambda: DVector<f64>,
    mu_bar: DVector<f64>,
    c: DMatrix<f64>,
    kappa: f64,
    a: DMatrix<f64>,
    m: DVector<f64>,
    a_tilde: DMatrix<f64>,
}

impl OUOracle {
    pub fn new(lambda: &[f64], mu_bar: &[f64], c: DMatrix<f64>, kappa: f64) -> Result<Self> {
        let n = lambda.len();
        if mu_bar.len() != n || c.nrows() != n || c.ncols() != n {
            return Err(Error::Config(format!(
                "inconsistent dimensions: {} speeds, {} levels, {}x{} covariance",
                n,
                mu_bar.len(),
                c.nrows(),
                c.ncols()
            )));
        }
        let chol = c.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            context: "mean-reverting covariance".into(),
        })?;
        let lambda = DVector::from_column_slice(lambda);
        let mu_bar = DVector::from_column_slice(mu_bar);
        let lambda_m = DMatrix::from_diagonal(&lambda);
        let mut g = &lambda_m * chol.solve(&lambda_m);
        let g_t = g.transpose();
        g = 0.5 * (g + g_t);
        let kp1 = kappa + 1.0;
        let mut a = DMatrix::zeros(2 * n, 2 * n);
        a.view_mut((0, 0), (n, n)).copy_from(&(-kp1 * &lambda_m));
        a.view_mut((0, n), (n, n)).copy_from(&(kp1 * &c));
        a.view_mut((n, 0), (n, n)).copy_from(&(-kappa * &g));
        a.view_mut((n, n), (n, n)).copy_from(&(kp1 * &lambda_m));
        let mut m = DVector::zeros(2 * n);
        m.rows_mut(0, n).copy_from(&(kp1 * &lambda_m * &mu_bar));
        m.rows_mut(n, n).copy_from(&(kappa * &g * &mu_bar));
        let mut a_tilde = DMatrix::zeros(2 * n + 1, 2 * n + 1);
        a_tilde.view_mut((0, 0), (2 * n, 2 * n)).copy_from(&a);
        a_tilde.view_mut((0, 2 * n), (2 * n, 1)).copy_from(&m);
        Ok(OUOracle {
            lambda,
            mu_bar,
            c,
            kappa,
            a,
            m,
            a_tilde,
        })
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// γ = 1/(κ+1); infinite at κ = −1, where the blocks of A built from
    /// γ⁻¹ = κ+1 simply vanish.
    pub fn gamma(&self) -> f64 {
        1.0 / (self.kappa + 1.0)
    }

    pub fn system_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn affine_term(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.lambda.component_mul(&(&self.mu_bar - x))
    }

    /// e^{−θÃ}: maps the augmented terminal vector (y; 0; 1) to the
    /// augmented phase vector θ before the horizon.
    fn phase_transition(&self, theta: f64) -> DMatrix<f64> {
        (-theta * &self.a_tilde).exp()
    }

    fn quadrature_weight(&self) -> DMatrix<f64> {
        // L(u) = ũᵀK̃ũ for ũ = (x; p; 1):
        // (1/2γ)pᵀCp − (κ/2)(x−μ̄)ᵀG(x−μ̄), G = ΛC⁻¹Λ.
        let n = self.dim();
        let dim = 2 * n + 1;
        let lambda_m = DMatrix::from_diagonal(&self.lambda);
        let chol = self.c.clone().cholesky().expect("validated at construction");
        let g = &lambda_m * chol.solve(&lambda_m);
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (n, n)).copy_from(&(-0.5 * self.kappa * &g));
        k.view_mut((n, n), (n, n))
            .copy_from(&(0.5 * (self.kappa + 1.0) * &self.c));
        let b_half = 0.5 * self.kappa * (&g * &self.mu_bar);
        k.view_mut((0, 2 * n), (n, 1)).copy_from(&b_half);
        k.view_mut((2 * n, 0), (1, n)).copy_from(&b_half.transpose());
        k[(2 * n, 2 * n)] = -0.5 * self.kappa * self.mu_bar.dot(&(&g * &self.mu_bar));
        k
    }
}

fn check_window(t: f64, horizon: f64) -> Result<f64> {
    let theta = horizon - t;
    if !theta.is_finite() || theta < 0.0 {
        return Err(Error::Domain(format!(
            "query time {t} lies after the horizon {horizon}"
        )));
    }
    Ok(theta)
}

/// The phase point at time s on the characteristic that ends at (y, 0):
/// u(s) = e^{−(T−s)A}((y; 0) + A⁻¹m) − A⁻¹m. When A is singular (or too
/// ill-conditioned to trust A⁻¹m) the augmented system gives the same
/// point without inverting A.
pub fn ou_characteristic(
    oracle: &OUOracle,
    y: &DVector<f64>,
    s: f64,
    horizon: f64,
) -> Result<PhasePoint> {
    let theta = check_window(s, horizon)?;
    let n = oracle.dim();
    let mut u_t = DVector::zeros(2 * n);
    u_t.rows_mut(0, n).copy_from(y);
    let a_inv_m = oracle.a.clone().lu().solve(&oracle.m).filter(|v| {
        (&oracle.a * v - &oracle.m).norm() <= 1e-10 * (1.0 + oracle.m.norm())
    });
    let u = match a_inv_m {
        Some(v) => (-theta * &oracle.a).exp() * (u_t + &v) - v,
        None => {
            let mut aug = DVector::zeros(2 * n + 1);
            aug.rows_mut(0, n).copy_from(y);
            aug[2 * n] = 1.0;
            let full = oracle.phase_transition(theta) * aug;
            full.rows(0, 2 * n).into_owned()
        }
    };
    Ok(PhasePoint {
        x: u.rows(0, n).into_owned(),
        p: u.rows(n, n).into_owned(),
    })
}

/// Terminal point y with Φ_t(y) = x, from the top rows of e^{−θÃ}:
/// x = D_xx y + d ⇒ y = D_xx⁻¹(x − d). Exact affine inversion.
pub fn ou_invert_terminal(
    oracle: &OUOracle,
    t: f64,
    horizon: f64,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let theta = check_window(t, horizon)?;
    let n = oracle.dim();
    let d = oracle.phase_transition(theta);
    let dxx = d.view((0, 0), (n, n)).into_owned();
    let shift = d.view((0, 2 * n), (n, 1));
    let rhs = x - shift;
    dxx.clone().lu().solve(&rhs).ok_or_else(|| {
        let sv = dxx.singular_values();
        Error::SingularGain {
            cond: sv[0] / sv[sv.len() - 1],
        }
    })
}

/// S⁰(t, x) = −∫ₜᵀ [(1/2γ)pᵀCp − V(x(s))] ds along the characteristic
/// through x.
///
/// The integrand is a quadratic form ũᵀK̃ũ in the augmented phase vector
/// ũ(s) = e^{−(T−s)Ã}ũ_T, so the integral is ũ_Tᵀ M(θ) ũ_T with
/// M(θ) = ∫₀^θ e^{−τÃᵀ} K̃ e^{−τÃ} dτ. M comes out of one big matrix
/// exponential: the top-right block G of exp(θ·(−Ãᵀ, K̃; 0, Ã)) satisfies
/// M = G·e^{−θÃ} (Van Loan block quadrature), exact up to the accuracy of
/// the exponential itself.
pub fn ou_s0(oracle: &OUOracle, t: f64, horizon: f64, x: &DVector<f64>) -> Result<f64> {
    let theta = check_window(t, horizon)?;
    let y = ou_invert_terminal(oracle, t, horizon, x)?;
    let n = oracle.dim();
    let dim = 2 * n + 1;
    let k = oracle.quadrature_weight();
    let mut big = DMatrix::zeros(2 * dim, 2 * dim);
    big.view_mut((0, 0), (dim, dim))
        .copy_from(&(-oracle.a_tilde.transpose()));
    big.view_mut((0, dim), (dim, dim)).copy_from(&k);
    big.view_mut((dim, dim), (dim, dim)).copy_from(&oracle.a_tilde);
    let e = (theta * big).exp();
    let g_block = e.view((0, dim), (dim, dim)).into_owned();
    let mut m_mat = g_block * oracle.phase_transition(theta);
    let m_t = m_mat.transpose();
    m_mat = 0.5 * (m_mat + m_t);
    let mut u_t = DVector::zeros(dim);
    u_t.rows_mut(0, n).copy_from(&y);
    u_t[2 * n] = 1.0;
    Ok(-u_t.dot(&(&m_mat * &u_t)))
}

/// ∇ₓS⁰(t, x) = p(t) = Ψ_t(Φ_t⁻¹(x)), read off the momentum rows of the
/// same transition matrix that inverts the flow.
pub fn ou_grad_s0(
    oracle: &OUOracle,
    t: f64,
    horizon: f64,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let theta = check_window(t, horizon)?;
    let y = ou_invert_terminal(oracle, t, horizon, x)?;
    let n = oracle.dim();
    let d = oracle.phase_transition(theta);
    let dpx = d.view((n, 0), (n, n));
    let shift = d.view((n, 2 * n), (n, 1));
    Ok(dpx * y + shift)
}

/// φ*(t, x) = (1/A_U)(C⁻¹Λ(μ̄−x) + ∇S⁰): myopic part plus the exact
/// hedging momentum. S¹ is x-independent here, so it contributes nothing.
pub fn ou_policy(
    oracle: &OUOracle,
    t: f64,
    horizon: f64,
    x: &DVector<f64>,
    a_u: f64,
) -> Result<DVector<f64>> {
    if a_u <= 0.0 {
        return Err(Error::Domain(format!(
            "absolute risk aversion must be positive, got {a_u}"
        )));
    }
    let chol = oracle.c.clone().cholesky().expect("validated at construction");
    let myopic = chol.solve(&oracle.drift(x));
    let p = ou_grad_s0(oracle, t, horizon, x)?;
    Ok((myopic + p) / a_u)
}

// ===== Exponential utility (κ = −1) =====

/// The first three expansion terms at κ = −1, where the state freezes and
/// everything is explicit:
///
///   S⁰ = V(x)(T−t)
///   S¹ = (1/4) tr(C(x)∇²V(x)) (T−t)²
///   S² = (1/24) (tr(C(x)∇²))² V(x) (T−t)³
///
/// with C frozen at the query point in the iterated operator. The momentum
/// along the frozen characteristic is p(s) = ∇V(x)(T−s) = ∇S⁰, and V ≤ 0
/// at κ = −1, so the value exponent decays with the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaraExpansion {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
}

pub fn cara_closed_forms(
    model: &dyn Model,
    kappa: f64,
    t: f64,
    horizon: f64,
    x: &DVector<f64>,
) -> Result<CaraExpansion> {
    if kappa != -1.0 {
        return Err(Error::Domain(format!(
            "closed forms hold only at kappa = -1, got {kappa}"
        )));
    }
    let theta = check_window(t, horizon)?;
    let v = model::potential(model, kappa, x)?;
    let c = model.covariance(x)?;
    let hess_v = model::potential_hessian(model, kappa, x)?;
    let s0 = v * theta;
    let s1 = 0.25 * (&c * &hess_v).trace() * theta * theta;
    // (tr(C∇²))²V: apply z ↦ tr(C(x)∇²V(z)) once in closed form, then
    // differentiate that scalar field at x by central differences. C stays
    // frozen at the query point throughout.
    let g1 = |z: &DVector<f64>| -> Result<f64> {
        Ok((&c * model::potential_hessian(model, kappa, z)?).trace())
    };
    let hess_g1 = fd_hessian_scalar(&g1, x)?;
    let s2 = (&c * hess_g1).trace() / 24.0 * theta * theta * theta;
    Ok(CaraExpansion { s0, s1, s2 })
}

/// Central-difference Hessian of a scalar field. The wide step keeps the
/// estimate stable when `f` itself contains finite differences.
fn fd_hessian_scalar(
    f: &dyn Fn(&DVector<f64>) -> Result<f64>,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    let step = |i: usize| 1e-3 * (1.0 + x[i].abs());
    let f0 = f(x)?;
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let hi = step(i);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += hi;
        xm[i] -= hi;
        hess[(i, i)] = (f(&xp)? - 2.0 * f0 + f(&xm)?) / (hi * hi);
        for j in 0..i {
            let hj = step(j);
            let mut xpp = x.clone();
            let mut xpm = x.clone();
            let mut xmp = x.clone();
            let mut xmm = x.clone();
            xpp[i] += hi;
            xpp[j] += hj;
            xpm[i] += hi;
            xpm[j] -= hj;
            xmp[i] -= hi;
            xmp[j] += hj;
            xmm[i] -= hi;
            xmm[j] -= hj;
            let v = (f(&xpp)? - f(&xpm)? - f(&xmp)? + f(&xmm)?) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::HamiltonianSystem;
    use crate::leapfrog::{integrate_backward, TimeGrid};
    use crate::model::{AssetDynamics, DomainBox, SeparableModel};
    use std::sync::Arc;

    #[test]
    fn lognormal_s0_scalar_frozen() {
        let mu = DVector::from_vec(vec![0.1]);
        let c = DMatrix::from_vec(1, 1, vec![0.04]);
        // (κ/2)μ²/σ²·Θ = 0.5·0.01/0.04 = 0.125.
        let s0 = lognormal_s0(&mu, &c, 1.0, 0.0, 1.0).unwrap();
        assert!((s0 - 0.125).abs() < 1e-15);
        assert_eq!(lognormal_s0(&mu, &c, 1.0, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn lognormal_s0_two_asset_hand_solve() {
        // C = [0.04, 0.024; 0.024, 0.09], det = 0.003024, worked by scalar
        // arithmetic: C⁻¹μ = (0.00258, 0.002)/det.
        let mu = DVector::from_vec(vec![0.05, 0.08]);
        let c = DMatrix::from_row_slice(2, 2, &[0.04, 0.024, 0.024, 0.09]);
        let det = 0.04 * 0.09 - 0.024 * 0.024;
        let w1 = (0.09 * 0.05 - 0.024 * 0.08) / det;
        let w2 = (-0.024 * 0.05 + 0.04 * 0.08) / det;
        let expected = 0.5 * (0.05 * w1 + 0.08 * w2) * 2.0;
        let s0 = lognormal_s0(&mu, &c, 1.0, 0.0, 2.0).unwrap();
        assert!((s0 - expected).abs() < 1e-14, "{s0} vs {expected}");
    }

    #[test]
    fn lognormal_policy_divides_by_price_and_aversion() {
        let mu = DVector::from_vec(vec![0.05, 0.08]);
        let c = DMatrix::from_row_slice(2, 2, &[0.04, 0.024, 0.024, 0.09]);
        let x = DVector::from_vec(vec![2.0, 4.0]);
        let phi = lognormal_policy(&mu, &c, 2.0, &x).unwrap();
        let det = 0.04 * 0.09 - 0.024 * 0.024;
        let w1 = (0.09 * 0.05 - 0.024 * 0.08) / det;
        let w2 = (-0.024 * 0.05 + 0.04 * 0.08) / det;
        assert!((phi[0] - w1 / 4.0).abs() < 1e-14);
        assert!((phi[1] - w2 / 8.0).abs() < 1e-14);
        assert!(lognormal_policy(&mu, &c, 0.0, &x).is_err());
    }

    fn ou2() -> OUOracle {
        let c = DMatrix::from_row_slice(2, 2, &[0.04, 0.024, 0.024, 0.09]);
        OUOracle::new(&[1.0, 0.7], &[0.5, 0.3], c, 1.0).unwrap()
    }

    #[test]
    fn characteristic_hits_terminal_data() {
        let oracle = ou2();
        let y = DVector::from_vec(vec![0.3, 0.6]);
        let end = ou_characteristic(&oracle, &y, 0.75, 0.75).unwrap();
        assert!((end.x - &y).norm() < 1e-12);
        assert!(end.p.norm() < 1e-12);
    }

    #[test]
    fn characteristic_solves_the_linear_ode() {
        // d/ds u = Au + m checked by finite differences in s.
        let oracle = ou2();
        let y = DVector::from_vec(vec![0.3, 0.6]);
        let horizon = 0.75;
        let s = 0.4;
        let eps = 1e-6;
        let up = ou_characteristic(&oracle, &y, s + eps, horizon).unwrap();
        let um = ou_characteristic(&oracle, &y, s - eps, horizon).unwrap();
        let mid = ou_characteristic(&oracle, &y, s, horizon).unwrap();
        let mut u = DVector::zeros(4);
        u.rows_mut(0, 2).copy_from(&mid.x);
        u.rows_mut(2, 2).copy_from(&mid.p);
        let rhs = oracle.system_matrix() * u + oracle.affine_term();
        let du = DVector::from_vec(vec![
            (up.x[0] - um.x[0]) / (2.0 * eps),
            (up.x[1] - um.x[1]) / (2.0 * eps),
            (up.p[0] - um.p[0]) / (2.0 * eps),
            (up.p[1] - um.p[1]) / (2.0 * eps),
        ]);
        assert!((du - rhs).norm() < 1e-6);
    }

    #[test]
    fn characteristic_matches_leapfrog() {
        let oracle = OUOracle::new(&[1.0], &[0.5], DMatrix::from_vec(1, 1, vec![0.04]), 1.0)
            .unwrap();
        let model = Arc::new(
            SeparableModel::mean_reverting(&[1.0], &[0.5], &[0.2], DMatrix::identity(1, 1))
                .unwrap(),
        );
        let sys = HamiltonianSystem::new(model, 1.0);
        let y = DVector::from_vec(vec![0.45]);
        let grid = TimeGrid::new(0.0, 0.5, 400).unwrap();
        let traj = integrate_backward(&sys, &y, &grid, 1e-13, 20).unwrap();
        for (k, state) in traj.states.iter().enumerate() {
            let exact = ou_characteristic(&oracle, &y, grid.node(k), 0.5).unwrap();
            assert!((state.x[0] - exact.x[0]).abs() <= 1e-6);
            assert!((state.p[0] - exact.p[0]).abs() <= 1e-6);
        }
    }

    /// Dense RK4 sweep of u̇ = Au + m backward from (y; 0), the reference
    /// for the singular-A fallback.
    fn rk4_characteristic(oracle: &OUOracle, y: &DVector<f64>, theta: f64) -> DVector<f64> {
        let n = oracle.dim();
        let mut u = DVector::zeros(2 * n);
        u.rows_mut(0, n).copy_from(y);
        let steps = 4000;
        let h = theta / steps as f64;
        // Integrating in τ = T−s: du/dτ = −(Au + m).
        let f = |u: &DVector<f64>| -(oracle.system_matrix() * u + oracle.affine_term());
        for _ in 0..steps {
            let k1 = f(&u);
            let k2 = f(&(&u + 0.5 * h * &k1));
            let k3 = f(&(&u + 0.5 * h * &k2));
            let k4 = f(&(&u + h * &k3));
            u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        u
    }

    #[test]
    fn zero_speed_falls_back_to_augmented_system() {
        // λ₁ = 0 zeroes a column of A; the A⁻¹m route is unavailable and
        // the augmented exponential must match dense integration.
        let c = DMatrix::from_row_slice(2, 2, &[0.04, 0.012, 0.012, 0.09]);
        let oracle = OUOracle::new(&[0.0, 1.0], &[0.5, 0.3], c, 1.0).unwrap();
        let y = DVector::from_vec(vec![0.2, 0.7]);
        let theta = 0.6;
        let point = ou_characteristic(&oracle, &y, 0.0, theta).unwrap();
        let dense = rk4_characteristic(&oracle, &y, theta);
        assert!((point.x[0] - dense[0]).abs() < 1e-10);
        assert!((point.x[1] - dense[1]).abs() < 1e-10);
        assert!((point.p[0] - dense[2]).abs() < 1e-10);
        assert!((point.p[1] - dense[3]).abs() < 1e-10);
    }

    #[test]
    fn regular_instance_agrees_with_dense_integration() {
        let oracle = ou2();
        let y = DVector::from_vec(vec![0.2, 0.7]);
        let theta = 0.6;
        let point = ou_characteristic(&oracle, &y, 0.0, theta).unwrap();
        let dense = rk4_characteristic(&oracle, &y, theta);
        assert!((point.x[0] - dense[0]).abs() < 1e-10);
        assert!((point.p[1] - dense[3]).abs() < 1e-10);
    }

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn recurse(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            whole: f64,
            tol: f64,
            depth: usize,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            let delta = left + right - whole;
            if depth == 0 || delta.abs() <= 15.0 * tol {
                return left + right + delta / 15.0;
            }
            recurse(f, a, m, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, right, 0.5 * tol, depth - 1)
        }
        recurse(f, a, b, simpson(f, a, b), tol, 30)
    }

    #[test]
    fn s0_matches_adaptive_quadrature_of_the_integrand() {
        for kappa in [1.0, -0.5] {
            let c = DMatrix::from_row_slice(2, 2, &[0.04, 0.024, 0.024, 0.09]);
            let oracle = OUOracle::new(&[1.0, 0.7], &[0.5, 0.3], c.clone(), kappa).unwrap();
            let x = DVector::from_vec(vec![0.3, 0.4]);
            let (t, horizon) = (0.0, 0.5);
            let closed = ou_s0(&oracle, t, horizon, &x).unwrap();
            let y = ou_invert_terminal(&oracle, t, horizon, &x).unwrap();
            let chol = c.clone().cholesky().unwrap();
            let integrand = |s: f64| {
                let u = ou_characteristic(&oracle, &y, s, horizon).unwrap();
                let kinetic = 0.5 * (kappa + 1.0) * (&c * &u.p).dot(&u.p);
                let a = oracle.drift(&u.x);
                let v = 0.5 * kappa * a.dot(&chol.solve(&a));
                kinetic - v
            };
            let quad = -adaptive_simpson(&integrand, t, horizon, 1e-13);
            assert!(
                (closed - quad).abs() <= 1e-10,
                "kappa {kappa}: {closed} vs {quad}"
            );
        }
    }

    #[test]
    fn s0_vanishes_at_the_horizon() {
        let oracle = ou2();
        let x = DVector::from_vec(vec![0.3, 0.4]);
        assert_eq!(ou_s0(&oracle, 0.75, 0.75, &x).unwrap(), 0.0);
    }

    #[test]
    fn s0_is_quadratic_in_x() {
        // Six generic points pin down a bivariate quadratic; a seventh
        // evaluation must land on the same surface.
        let oracle = ou2();
        let (t, horizon) = (0.1, 0.85);
        let pts = [
            (0.2, 0.3),
            (0.5, 0.1),
            (0.7, 0.6),
            (0.1, 0.8),
            (0.9, 0.4),
            (0.4, 0.9),
        ];
        let mut mat = DMatrix::zeros(6, 6);
        let mut rhs = DVector::zeros(6);
        for (row, &(u, v)) in pts.iter().enumerate() {
            mat[(row, 0)] = 1.0;
            mat[(row, 1)] = u;
            mat[(row, 2)] = v;
            mat[(row, 3)] = u * u;
            mat[(row, 4)] = u * v;
            mat[(row, 5)] = v * v;
            rhs[row] = ou_s0(&oracle, t, horizon, &DVector::from_vec(vec![u, v])).unwrap();
        }
        let coeff = mat.lu().solve(&rhs).unwrap();
        let (u, v) = (0.35, 0.55);
        let predicted = coeff[0]
            + coeff[1] * u
            + coeff[2] * v
            + coeff[3] * u * u
            + coeff[4] * u * v
            + coeff[5] * v * v;
        let actual = ou_s0(&oracle, t, horizon, &DVector::from_vec(vec![u, v])).unwrap();
        assert!((predicted - actual).abs() <= 1e-9, "{predicted} vs {actual}");
    }

    #[test]
    fn grad_s0_matches_finite_differences() {
        let oracle = ou2();
        let (t, horizon) = (0.0, 0.5);
        let x = DVector::from_vec(vec![0.3, 0.4]);
        let grad = ou_grad_s0(&oracle, t, horizon, &x).unwrap();
        for i in 0..2 {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (ou_s0(&oracle, t, horizon, &xp).unwrap()
                - ou_s0(&oracle, t, horizon, &xm).unwrap())
                / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "{fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn round_trip_through_terminal_inversion() {
        let oracle = ou2();
        let (t, horizon) = (0.05, 0.8);
        let x = DVector::from_vec(vec![0.42, 0.17]);
        let y = ou_invert_terminal(&oracle, t, horizon, &x).unwrap();
        let back = ou_characteristic(&oracle, &y, t, horizon).unwrap();
        assert!((back.x - &x).norm() < 1e-11);
        let p = ou_grad_s0(&oracle, t, horizon, &x).unwrap();
        assert!((back.p - p).norm() < 1e-11);
    }

    #[test]
    fn policy_combines_myopic_and_hedging_terms() {
        let oracle = ou2();
        let (t, horizon) = (0.0, 0.5);
        let x = DVector::from_vec(vec![0.3, 0.4]);
        let a_u = 2.5;
        let phi = ou_policy(&oracle, t, horizon, &x, a_u).unwrap();
        let c = DMatrix::from_row_slice(2, 2, &[0.04, 0.024, 0.024, 0.09]);
        let myopic = c.cholesky().unwrap().solve(&oracle.drift(&x));
        let p = ou_grad_s0(&oracle, t, horizon, &x).unwrap();
        assert!(((myopic + p) / a_u - phi).norm() < 1e-14);
    }

    fn cara_ou_model() -> Arc<SeparableModel> {
        Arc::new(
            SeparableModel::mean_reverting(&[1.0], &[0.5], &[0.2], DMatrix::identity(1, 1))
                .unwrap(),
        )
    }

    #[test]
    fn cara_terms_vanish_at_the_horizon() {
        let model = cara_ou_model();
        let x = DVector::from_vec(vec![0.3]);
        let terms = cara_closed_forms(model.as_ref(), -1.0, 0.7, 0.7, &x).unwrap();
        assert_eq!(terms, CaraExpansion { s0: 0.0, s1: 0.0, s2: 0.0 });
    }

    #[test]
    fn cara_rejects_other_kappas() {
        let model = cara_ou_model();
        let x = DVector::from_vec(vec![0.3]);
        assert!(cara_closed_forms(model.as_ref(), -0.999, 0.0, 0.7, &x).is_err());
    }

    #[test]
    fn quadratic_potential_kills_the_third_term() {
        // V quadratic and C constant: tr(C∇²V) is constant, the second
        // operator application lands on a constant field, S² = 0 exactly.
        let model = cara_ou_model();
        let x = DVector::from_vec(vec![0.3]);
        let theta: f64 = 0.7;
        let terms = cara_closed_forms(model.as_ref(), -1.0, 0.0, theta, &x).unwrap();
        // V = −(1/2)λ²(μ̄−x)²/C = −(1/2)·0.04/0.04 = −0.5 at x = 0.3.
        assert!((terms.s0 - (-0.5 * theta)).abs() < 1e-12);
        // ∇²V = −ΛC⁻¹Λ = −25; S¹ = (1/4)·0.04·(−25)·θ² = −0.25θ².
        assert!((terms.s1 - (-0.25 * theta * theta)).abs() < 1e-10);
        assert_eq!(terms.s2, 0.0);
    }

    #[test]
    fn nonlinear_model_matches_hand_differentiation() {
        // a = 0.1, b = 0.2(1+x²): V(x) = −0.005/b² = −0.125/(1+x²)².
        // At x = 0.5: V = −0.08, V″ = 0.5·1.25⁻³ − 0.75·1.25⁻⁴ = −0.0512,
        // C = 0.0625, so S¹ = (1/4)·0.0625·(−0.0512)·θ² = −0.0008θ².
        let model = SeparableModel::new(
            vec![AssetDynamics::Custom {
                mu: Arc::new(|_| 0.1),
                dmu: Arc::new(|_| 0.0),
                sigma: Arc::new(|x: f64| 0.2 * (1.0 + x * x)),
                dsigma: Arc::new(|x: f64| 0.4 * x),
            }],
            DMatrix::identity(1, 1),
            DomainBox::unbounded(1),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.5]);
        let theta: f64 = 0.7;
        let terms = cara_closed_forms(&model, -1.0, 0.0, theta, &x).unwrap();
        assert!((terms.s0 - (-0.08 * theta)).abs() < 1e-12);
        assert!(
            (terms.s1 - (-0.0008 * theta * theta)).abs() < 1e-8,
            "s1 = {}",
            terms.s1
        );
    }

    #[test]
    fn oracle_rejects_bad_inputs() {
        let c = DMatrix::from_row_slice(2, 2, &[0.04, 0.2, 0.2, 0.09]);
        assert!(OUOracle::new(&[1.0, 0.7], &[0.5, 0.3], c, 1.0).is_err());
        let oracle = ou2();
        let x = DVector::from_vec(vec![0.3, 0.4]);
        assert!(ou_s0(&oracle, 1.0, 0.5, &x).is_err());
    }
}
