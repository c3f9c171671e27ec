//! Controlled diffusion models: drift a(x), covariance C(x) = b(x)ᵀb(x),
//! their derivatives, and the potential V(x) = (κ/2) a(x)ᵀC(x)⁻¹a(x).
//!
//! The pipeline consumes models only through C, a, and their derivatives; a
//! diffusion factor B with BBᵀ = C is exposed solely for path simulation.
//! Models are defined on an open axis-aligned box; evaluating outside it is
//! an error rather than an extrapolation, because C may lose positive
//! definiteness there (lognormal covariance at x ≤ 0, for instance).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Open axis-aligned box, with finite or infinite bounds per coordinate.
#[derive(Debug, Clone)]
pub struct DomainBox {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl DomainBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Config(format!(
                "domain bounds have mismatched lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("domain box requires lo < hi per coordinate".into()));
        }
        Ok(DomainBox { lo, hi })
    }

    /// The whole of ℝⁿ.
    pub fn unbounded(n: usize) -> Self {
        DomainBox {
            lo: DVector::from_element(n, f64::NEG_INFINITY),
            hi: DVector::from_element(n, f64::INFINITY),
        }
    }

    /// The open positive orthant (0, ∞)ⁿ.
    pub fn positive_orthant(n: usize) -> Self {
        DomainBox {
            lo: DVector::zeros(n),
            hi: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(&v, (&l, &h))| l < v && v < h)
    }

    pub fn check(&self, x: &DVector<f64>) -> Result<()> {
        for (i, &v) in x.iter().enumerate() {
            if !(self.lo[i] < v && v < self.hi[i]) {
                return Err(Error::OutOfDomain {
                    coordinate: i,
                    value: v,
                    lo: self.lo[i],
                    hi: self.hi[i],
                });
            }
        }
        Ok(())
    }
}

/// A controlled diffusion with enough derivative structure for the solver:
/// drift Jacobian, per-coordinate covariance derivatives, and (through the
/// free functions below) gradient and Hessian of the potential.
pub trait Model: Send + Sync {
    fn dim(&self) -> usize;

    fn domain(&self) -> &DomainBox;

    /// Drift a(x).
    fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Jacobian of the drift, entry (i, j) = ∂aᵢ/∂xʲ.
    fn drift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Instantaneous covariance C(x), symmetric positive definite on the
    /// domain. Positive definiteness is verified lazily, wherever a Cholesky
    /// factorization is actually taken.
    fn covariance(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// The slice ∂C/∂xⁱ, a symmetric n×n matrix.
    fn covariance_derivative(&self, x: &DVector<f64>, i: usize) -> Result<DMatrix<f64>>;

    /// A factor B(x) with B Bᵀ = C(x), used only by the path simulator. The
    /// default takes the Cholesky factor of C; separable models override it
    /// with (diag σ)·L where ρ = L Lᵀ, which is the same product arranged
    /// per-asset.
    fn diffusion(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let c = self.covariance(x)?;
        let chol = c.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            context: format!("C(x) at x = {:?}", x.as_slice()),
        })?;
        Ok(chol.l())
    }

    /// Analytic Hessian of V where the model family admits one (zero for
    /// lognormal, constant for linear mean-reverting drift with constant
    /// volatility). `None` means: fall back to finite differences of the
    /// gradient.
    fn potential_hessian_closed_form(&self, kappa: f64, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let _ = (kappa, x);
        None
    }

    /// Analytic ∇V where the family admits one. Lognormal dynamics have a
    /// constant V whose gradient must vanish to the last bit (the momentum
    /// stays pinned at zero along whole characteristics); the general
    /// formula only cancels to roundoff there. `None`: use the general
    /// formula.
    fn potential_gradient_closed_form(&self, kappa: f64, x: &DVector<f64>) -> Option<DVector<f64>> {
        let _ = (kappa, x);
        None
    }
}

// ===== Potential and its derivatives =====

fn cholesky_of_covariance(
    model: &dyn Model,
    x: &DVector<f64>,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let c = model.covariance(x)?;
    c.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        context: format!("C(x) at x = {:?}", x.as_slice()),
    })
}

/// V(x) = (κ/2) a(x)ᵀ C(x)⁻¹ a(x), via Cholesky solve.
pub fn potential(model: &dyn Model, kappa: f64, x: &DVector<f64>) -> Result<f64> {
    let a = model.drift(x)?;
    let chol = cholesky_of_covariance(model, x)?;
    let w = chol.solve(&a);
    Ok(0.5 * kappa * a.dot(&w))
}

/// ∇V(x). With w = C⁻¹a this is κ Jᵀw − (κ/2)(wᵀ(∂C/∂xⁱ)w)ᵢ, exact given
/// exact model derivatives. Models with a structurally constant V override
/// [`Model::potential_gradient_closed_form`] and skip the formula.
pub fn potential_gradient(model: &dyn Model, kappa: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    model.domain().check(x)?;
    if let Some(g) = model.potential_gradient_closed_form(kappa, x) {
        return Ok(g);
    }
    let a = model.drift(x)?;
    let chol = cholesky_of_covariance(model, x)?;
    let w = chol.solve(&a);
    let j = model.drift_jacobian(x)?;
    let mut grad = j.transpose() * &w * kappa;
    for i in 0..model.dim() {
        let dc = model.covariance_derivative(x, i)?;
        grad[i] -= 0.5 * kappa * (&dc * &w).dot(&w);
    }
    Ok(grad)
}

/// ∇²V(x): the model's closed form when available, otherwise symmetrized
/// central finite differences of ∇V with per-coordinate step 1e−5·(1+|xⁱ|).
pub fn potential_hessian(model: &dyn Model, kappa: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.domain().check(x)?;
    if let Some(h) = model.potential_hessian_closed_form(kappa, x) {
        return Ok(h);
    }
    let n = model.dim();
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-5 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let gp = potential_gradient(model, kappa, &xp)?;
        let gm = potential_gradient(model, kappa, &xm)?;
        let col = (gp - gm) / (2.0 * step);
        hess.set_column(j, &col);
    }
    // Exact Hessians are symmetric; differencing breaks that at O(step²).
    let hess_t = hess.transpose();
    Ok((hess + hess_t) * 0.5)
}

// ===== Separable model family =====

type Scalar1D = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Per-asset dynamics for a separable model: drift and volatility are
/// functions of that asset's own coordinate only.
#[derive(Clone)]
pub enum AssetDynamics {
    /// dXⁱ = μ Xⁱ dt + σ Xⁱ dZⁱ.
    Lognormal { mu: f64, sigma: f64 },
    /// dXⁱ = λ(μ̄ − Xⁱ) dt + σ dZⁱ (Ornstein-Uhlenbeck dynamics).
    MeanReverting { lambda: f64, mu_bar: f64, sigma: f64 },
    /// Arbitrary 1-D drift and volatility with analytic first derivatives.
    Custom {
        mu: Scalar1D,
        dmu: Scalar1D,
        sigma: Scalar1D,
        dsigma: Scalar1D,
    },
}

impl std::fmt::Debug for AssetDynamics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AssetDynamics::Lognormal { mu, sigma } => {
                write!(f, "Lognormal {{ mu: {mu}, sigma: {sigma} }}")
            }
            AssetDynamics::MeanReverting { lambda, mu_bar, sigma } => {
                write!(f, "MeanReverting {{ lambda: {lambda}, mu_bar: {mu_bar}, sigma: {sigma} }}")
            }
            AssetDynamics::Custom { .. } => write!(f, "Custom {{ .. }}"),
        }
    }
}

impl AssetDynamics {
    fn mu(&self, x: f64) -> f64 {
        match self {
            AssetDynamics::Lognormal { mu, .. } => mu * x,
            AssetDynamics::MeanReverting { lambda, mu_bar, .. } => lambda * (mu_bar - x),
            AssetDynamics::Custom { mu, .. } => mu(x),
        }
    }

    fn dmu(&self, x: f64) -> f64 {
        match self {
            AssetDynamics::Lognormal { mu, .. } => *mu,
            AssetDynamics::MeanReverting { lambda, .. } => -lambda,
            AssetDynamics::Custom { dmu, .. } => dmu(x),
        }
    }

    fn sigma(&self, x: f64) -> f64 {
        match self {
            AssetDynamics::Lognormal { sigma, .. } => sigma * x,
            AssetDynamics::MeanReverting { sigma, .. } => *sigma,
            AssetDynamics::Custom { sigma, .. } => sigma(x),
        }
    }

    fn dsigma(&self, x: f64) -> f64 {
        match self {
            AssetDynamics::Lognormal { sigma, .. } => *sigma,
            AssetDynamics::MeanReverting { .. } => 0.0,
            AssetDynamics::Custom { dsigma, .. } => dsigma(x),
        }
    }
}

/// n-asset model with per-asset dynamics and a constant correlation matrix:
/// C_ij(x) = ρ_ij σⁱ(xⁱ) σʲ(xʲ).
#[derive(Debug)]
pub struct SeparableModel {
    assets: Vec<AssetDynamics>,
    rho: DMatrix<f64>,
    /// Lower Cholesky factor of ρ; the diffusion factor is (diag σ)·L.
    rho_chol_l: DMatrix<f64>,
    domain: DomainBox,
}

impl SeparableModel {
    pub fn new(assets: Vec<AssetDynamics>, rho: DMatrix<f64>, domain: DomainBox) -> Result<Self> {
        let n = assets.len();
        if n == 0 {
            return Err(Error::Config("separable model needs at least one asset".into()));
        }
        if rho.nrows() != n || rho.ncols() != n {
            return Err(Error::Config(format!(
                "correlation matrix is {}x{}, expected {n}x{n}",
                rho.nrows(),
                rho.ncols()
            )));
        }
        if domain.dim() != n {
            return Err(Error::Config("domain dimension does not match asset count".into()));
        }
        for i in 0..n {
            if (rho[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::Config("correlation matrix must have unit diagonal".into()));
            }
            for j in 0..i {
                if (rho[(i, j)] - rho[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Config("correlation matrix must be symmetric".into()));
                }
            }
        }
        let rho_chol_l = rho
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite {
                context: "correlation matrix".into(),
            })?
            .l();
        Ok(SeparableModel { assets, rho, rho_chol_l, domain })
    }

    /// All-lognormal model on the positive orthant.
    pub fn lognormal(mu: &[f64], sigma: &[f64], rho: DMatrix<f64>) -> Result<Self> {
        let n = mu.len();
        if sigma.len() != n {
            return Err(Error::Config("mu and sigma lengths differ".into()));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("volatilities must be positive".into()));
        }
        let assets = mu
            .iter()
            .zip(sigma)
            .map(|(&mu, &sigma)| AssetDynamics::Lognormal { mu, sigma })
            .collect();
        Self::new(assets, rho, DomainBox::positive_orthant(n))
    }

    /// All mean-reverting model on ℝⁿ: constant volatilities, linear drift
    /// toward μ̄ at rates λ.
    pub fn mean_reverting(
        lambda: &[f64],
        mu_bar: &[f64],
        sigma: &[f64],
        rho: DMatrix<f64>,
    ) -> Result<Self> {
        let n = lambda.len();
        if mu_bar.len() != n || sigma.len() != n {
            return Err(Error::Config("lambda, mu_bar, sigma lengths differ".into()));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("volatilities must be positive".into()));
        }
        if lambda.iter().any(|&l| l <= 0.0) {
            return Err(Error::Config("mean-reversion rates must be positive".into()));
        }
        let assets = lambda
            .iter()
            .zip(mu_bar)
            .zip(sigma)
            .map(|((&lambda, &mu_bar), &sigma)| AssetDynamics::MeanReverting { lambda, mu_bar, sigma })
            .collect();
        Self::new(assets, rho, DomainBox::unbounded(n))
    }

    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.rho
    }

    fn sigmas(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.assets.len(),
            self.assets.iter().zip(x.iter()).map(|(a, &xi)| a.sigma(xi)),
        )
    }

    fn all_mean_reverting(&self) -> bool {
        self.assets
            .iter()
            .all(|a| matches!(a, AssetDynamics::MeanReverting { .. }))
    }

    fn all_lognormal(&self) -> bool {
        self.assets
            .iter()
            .all(|a| matches!(a, AssetDynamics::Lognormal { .. }))
    }
}

impl Model for SeparableModel {
    fn dim(&self) -> usize {
        self.assets.len()
    }

    fn domain(&self) -> &DomainBox {
        &self.domain
    }

    fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.domain.check(x)?;
        Ok(DVector::from_iterator(
            self.assets.len(),
            self.assets.iter().zip(x.iter()).map(|(a, &xi)| a.mu(xi)),
        ))
    }

    fn drift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.domain.check(x)?;
        Ok(DMatrix::from_diagonal(&DVector::from_iterator(
            self.assets.len(),
            self.assets.iter().zip(x.iter()).map(|(a, &xi)| a.dmu(xi)),
        )))
    }

    fn covariance(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.domain.check(x)?;
        let s = self.sigmas(x);
        let n = self.dim();
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.rho[(i, j)] * s[i] * s[j];
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        Ok(c)
    }

    fn covariance_derivative(&self, x: &DVector<f64>, i: usize) -> Result<DMatrix<f64>> {
        self.domain.check(x)?;
        let n = self.dim();
        let s = self.sigmas(x);
        let ds_i = self.assets[i].dsigma(x[i]);
        // Only row i and column i depend on xⁱ.
        let mut dc = DMatrix::zeros(n, n);
        for l in 0..n {
            if l == i {
                dc[(i, i)] = 2.0 * self.rho[(i, i)] * s[i] * ds_i;
            } else {
                let v = self.rho[(i, l)] * ds_i * s[l];
                dc[(i, l)] = v;
                dc[(l, i)] = v;
            }
        }
        Ok(dc)
    }

    fn diffusion(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.domain.check(x)?;
        Ok(DMatrix::from_diagonal(&self.sigmas(x)) * &self.rho_chol_l)
    }

    fn potential_gradient_closed_form(&self, kappa: f64, x: &DVector<f64>) -> Option<DVector<f64>> {
        let _ = (kappa, x);
        // dμⁱ/dxⁱ and μⁱ d log σⁱ/dxⁱ are both the constant μᵢ for
        // lognormal dynamics: V is flat and the zero must be exact, not a
        // roundoff cancellation. Mean-reverting drift needs no branch; the
        // general formula is already exact for it (∂C/∂xⁱ = 0).
        if self.all_lognormal() {
            return Some(DVector::zeros(self.dim()));
        }
        None
    }

    fn potential_hessian_closed_form(&self, kappa: f64, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        if self.all_lognormal() {
            // V is constant in x for lognormal dynamics.
            return Some(DMatrix::zeros(self.dim(), self.dim()));
        }
        if self.all_mean_reverting() {
            // V is the quadratic (κ/2)(μ̄−x)ᵀΛC⁻¹Λ(μ̄−x): Hessian κ ΛC⁻¹Λ.
            let lambda = DMatrix::from_diagonal(&DVector::from_iterator(
                self.dim(),
                self.assets.iter().map(|a| match a {
                    AssetDynamics::MeanReverting { lambda, .. } => *lambda,
                    _ => unreachable!(),
                }),
            ));
            let c = self.covariance(x).ok()?;
            let cinv_lambda = c.cholesky()?.solve(&lambda);
            return Some(kappa * &lambda * cinv_lambda);
        }
        None
    }
}

/// Gradient of V for a separable model in the per-asset form
/// κ(dμⁱ/dxⁱ − μⁱ d log σⁱ/dxⁱ)(C⁻¹μ)ᵢ. Kept alongside the generic
/// [`potential_gradient`] as an independent route to the same values.
pub fn separable_potential_gradient(
    model: &SeparableModel,
    kappa: f64,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mu = model.drift(x)?;
    let chol = cholesky_of_covariance(model, x)?;
    let w = chol.solve(&mu);
    Ok(DVector::from_iterator(
        model.dim(),
        model.assets.iter().enumerate().map(|(i, a)| {
            let xi = x[i];
            kappa * (a.dmu(xi) - a.mu(xi) * a.dsigma(xi) / a.sigma(xi)) * w[i]
        }),
    ))
}

// ===== Closure-backed model =====

type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type MatrixSliceFn = Arc<dyn Fn(&DVector<f64>, usize) -> DMatrix<f64> + Send + Sync>;

/// Model defined directly by closures. Library-only: the CLI never builds
/// one. This is the escape hatch for models outside the separable family,
/// drift coupling across coordinates included.
#[derive(Clone)]
pub struct FnModel {
    pub n: usize,
    pub domain: DomainBox,
    pub drift: VectorFn,
    pub drift_jacobian: MatrixFn,
    pub covariance: MatrixFn,
    pub covariance_derivative: MatrixSliceFn,
}

impl Model for FnModel {
    fn dim(&self) -> usize {
        self.n
    }

    fn domain(&self) -> &DomainBox {
        &self.domain
    }

    fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.domain.check(x)?;
        Ok((self.drift)(x))
    }

    fn drift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.domain.check(x)?;
        Ok((self.drift_jacobian)(x))
    }

    fn covariance(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.domain.check(x)?;
        Ok((self.covariance)(x))
    }

    fn covariance_derivative(&self, x: &DVector<f64>, i: usize) -> Result<DMatrix<f64>> {
        self.domain.check(x)?;
        Ok((self.covariance_derivative)(x, i))
    }
}
