//! The flow maps Φ_t(y) = x(t), Ψ_t(y) = p(t) defined by backward
//! characteristic integration, the constant-coefficient variational gain
//! F_t ≈ ∇Φ_t obtained from one matrix exponential, and the modified Newton
//! inversion of Φ_t that turns a query point x into its terminal value y.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::hamiltonian::HamiltonianSystem;
use crate::leapfrog::{
    integrate_backward, PhaseTrajectory, TimeGrid, DEFAULT_MAX_INNER, DEFAULT_TOL,
};
use crate::Result;

/// Coefficients of the characteristic system linearized at the terminal
/// point (y, 0): Q = (κ+1)∇a-transpose convention resolved to the plain
/// Jacobian, R = (κ+1)C(y), Umat = ∇²V(y).
#[derive(Debug, Clone)]
pub struct VariationalBlocks {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub umat: DMatrix<f64>,
}

impl VariationalBlocks {
    pub fn at_terminal(sys: &HamiltonianSystem, y: &DVector<f64>) -> Result<Self> {
        let zero = DVector::zeros(sys.dim());
        let d = sys.second_derivatives(y, &zero)?;
        Ok(VariationalBlocks {
            q: d.hxp.transpose(),
            r: d.hpp,
            umat: d.hxx,
        })
    }

    /// M = (Q, R; −U, −Qᵀ). The transposed corner keeps M infinitesimally
    /// symplectic; for separable models Q is diagonal and the distinction
    /// disappears.
    pub fn system_matrix(&self) -> DMatrix<f64> {
        let n = self.q.nrows();
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.q);
        m.view_mut((0, n), (n, n)).copy_from(&self.r);
        m.view_mut((n, 0), (n, n)).copy_from(&(-&self.umat));
        m.view_mut((n, n), (n, n)).copy_from(&(-self.q.transpose()));
        m
    }
}

/// Outcome of inverting the flow at a query point.
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub y: DVector<f64>,
    pub iterations: usize,
    pub final_residual: f64,
    pub trajectory: PhaseTrajectory,
}

/// (Φ_t(y), Ψ_t(y)) with the full discrete characteristic behind them.
pub fn flow(
    sys: &HamiltonianSystem,
    y: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<(DVector<f64>, DVector<f64>, PhaseTrajectory)> {
    let traj = integrate_backward(sys, y, grid, DEFAULT_TOL, DEFAULT_MAX_INNER)?;
    let start = &traj.states[0];
    Ok((start.x.clone(), start.p.clone(), traj))
}

const GAIN_CONDITION_LIMIT: f64 = 1e12;

/// F_t(y) and G_t(y): the x- and p-sensitivities of the flow to terminal
/// data under the frozen-coefficient variational system,
/// (F_t; G_t) = e^{−(T−t)M(y)}(𝟙; 0).
pub fn variational_pair(
    sys: &HamiltonianSystem,
    y: &DVector<f64>,
    t: f64,
    horizon: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = sys.dim();
    let theta = horizon - t;
    if !theta.is_finite() || theta < 0.0 {
        return Err(Error::Domain(format!(
            "query time {t} lies after the horizon {horizon}"
        )));
    }
    let m = VariationalBlocks::at_terminal(sys, y)?.system_matrix();
    let e = (-theta * m).exp();
    let f = e.view((0, 0), (n, n)).into_owned();
    let g = e.view((n, 0), (n, n)).into_owned();
    Ok((f, g))
}

/// F_t(y) alone, with a conditioning guard: a gain too ill-conditioned to
/// solve with signals that the horizon outruns the linearized
/// preconditioner.
pub fn variational_gain(
    sys: &HamiltonianSystem,
    y: &DVector<f64>,
    t: f64,
    horizon: f64,
) -> Result<DMatrix<f64>> {
    let (f, _) = variational_pair(sys, y, t, horizon)?;
    let sv = f.singular_values();
    let cond = sv[0] / sv[sv.len() - 1];
    if !cond.is_finite() || cond > GAIN_CONDITION_LIMIT {
        return Err(Error::SingularGain { cond });
    }
    Ok(f)
}

const MAX_NEWTON_ITERATIONS: usize = 100;

/// Solves Φ_t(y) = x for y by the modified Newton iteration
/// y ← y − F_t(y)⁻¹(Φ_t(y) − x), starting from y = x. Converged when the
/// update-step norm falls to eps and the residual ‖Φ_t(y)−x‖ is at
/// eps·(1+‖x‖); the returned trajectory is the characteristic of the final
/// y, so its own states are consistent with the answer.
pub fn invert_flow(
    sys: &HamiltonianSystem,
    x: &DVector<f64>,
    grid: &TimeGrid,
    eps: f64,
) -> Result<InversionResult> {
    let x_scale = 1.0 + x.norm();
    let mut y = x.clone();
    let mut last_residual = f64::INFINITY;
    for iterations in 1..=MAX_NEWTON_ITERATIONS {
        let (phi, _, _) = flow(sys, &y, grid)?;
        let residual = phi - x;
        last_residual = residual.norm();
        let f = variational_gain(sys, &y, grid.t, grid.horizon)?;
        let delta = f
            .clone()
            .lu()
            .solve(&residual)
            .ok_or(Error::SingularGain { cond: f64::INFINITY })?;
        y -= &delta;
        if delta.norm() <= eps {
            let (phi, _, traj) = flow(sys, &y, grid)?;
            let final_residual = (phi - x).norm();
            if final_residual <= eps * x_scale {
                return Ok(InversionResult {
                    y,
                    iterations,
                    final_residual,
                    trajectory: traj,
                });
            }
            last_residual = final_residual;
        }
    }
    Err(Error::MaxIterationsExceeded {
        iterations: MAX_NEWTON_ITERATIONS,
        residual: last_residual,
    })
}

/// ∇Φ_t(y) by central differences, the expensive reference F_t stands in
/// for. Step 1e−6·(1+|yⁱ|) per coordinate.
pub fn flow_jacobian_fd(
    sys: &HamiltonianSystem,
    y: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<DMatrix<f64>> {
    let n = sys.dim();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-6 * (1.0 + y[j].abs());
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[j] += step;
        ym[j] -= step;
        let (xp, _, _) = flow(sys, &yp, grid)?;
        let (xm, _, _) = flow(sys, &ym, grid)?;
        jac.set_column(j, &((xp - xm) / (2.0 * step)));
    }
    Ok(jac)
}
