//! Backward-in-time Störmer-Verlet integration of the characteristic system
//! from terminal data (x(T) = y, p(T) = 0).
//!
//! One backward step from (x̂_k, p̂_k) to node k−1 is
//!
//!   p̂_{k−1/2} = p̂_k + (h/2) ∇ₓH(x̂_k, p̂_{k−1/2})                      (implicit)
//!   x̂_{k−1}   = x̂_k − (h/2) (∇ₚH(x̂_k, p̂_{k−1/2}) + ∇ₚH(x̂_{k−1}, p̂_{k−1/2}))  (implicit)
//!   p̂_{k−1}   = p̂_{k−1/2} + (h/2) ∇ₓH(x̂_{k−1}, p̂_{k−1/2})            (explicit)
//!
//! iterated k = N down to 1. The implicit stages are solved by Newton with
//! analytic Jacobians; a damped fixed-point fallback covers the (rare)
//! singular-Jacobian case. The scheme is symplectic and O(h²) accurate.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::hamiltonian::HamiltonianSystem;
use crate::Result;

/// Uniform grid t_k = t + k·h, k = 0..N, h = (T−t)/N. `t = horizon` is
/// allowed, giving the degenerate h = 0 grid used by terminal-time queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t: f64,
    pub horizon: f64,
    pub n: usize,
    pub h: f64,
}

impl TimeGrid {
    pub fn new(t: f64, horizon: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !t.is_finite() || !horizon.is_finite() || t > horizon {
            return Err(Error::Config(format!(
                "invalid time window: t = {t}, horizon = {horizon}"
            )));
        }
        Ok(TimeGrid {
            t,
            horizon,
            n,
            h: (horizon - t) / n as f64,
        })
    }

    pub fn node(&self, k: usize) -> f64 {
        self.t + k as f64 * self.h
    }

    pub fn span(&self) -> f64 {
        self.horizon - self.t
    }
}

/// A point (x, p) of the characteristic phase space; p is the running value
/// gradient ∇S⁰ along the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
}

/// A discrete backward characteristic. `states[k]` sits at grid node k;
/// `half_momenta[k−1]` is the momentum used inside step k (the implicit
/// stage value, or the true midpoint momentum when the integrator ran
/// refined). `midpoints[k−1]`, present on refined runs, is the full phase
/// point at t_{k−1/2}, exact to the same order as the nodes.
#[derive(Debug, Clone)]
pub struct PhaseTrajectory {
    pub grid: TimeGrid,
    pub states: Vec<PhasePoint>,
    pub half_momenta: Vec<DVector<f64>>,
    pub midpoints: Option<Vec<PhasePoint>>,
    pub terminal_y: DVector<f64>,
}

impl PhaseTrajectory {
    pub fn dim(&self) -> usize {
        self.terminal_y.len()
    }

    /// CSV dump with columns k, t_k, x_1..x_n, p_1..p_n, one row per node.
    pub fn to_csv(&self) -> String {
        let n = self.dim();
        let mut out = String::from("k,t_k");
        for i in 1..=n {
            write!(out, ",x_{i}").unwrap();
        }
        for i in 1..=n {
            write!(out, ",p_{i}").unwrap();
        }
        out.push('\n');
        for (k, state) in self.states.iter().enumerate() {
            write!(out, "{k},{:.16e}", self.grid.node(k)).unwrap();
            for v in state.x.iter().chain(state.p.iter()) {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

const FALLBACK_DAMPING: f64 = 0.5;

/// Newton on `residual`, starting from `guess`, with `jacobian` giving
/// ∂residual/∂v. Returns as soon as ‖residual‖ ≤ tol (the initial guess may
/// already qualify, e.g. at h = 0). Singular Jacobians switch the remaining
/// budget to damped fixed-point steps v ← v − ω·residual.
fn newton_solve(
    guess: &DVector<f64>,
    tol: f64,
    max_inner: usize,
    step: usize,
    mut residual: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    mut jacobian: impl FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
) -> Result<DVector<f64>> {
    let mut v = guess.clone();
    let mut r = residual(&v)?;
    if r.norm() <= tol {
        return Ok(v);
    }
    for _ in 0..max_inner {
        let j = jacobian(&v)?;
        match j.lu().solve(&r) {
            Some(delta) => v -= delta,
            None => v -= FALLBACK_DAMPING * &r,
        }
        r = residual(&v)?;
        if r.norm() <= tol {
            return Ok(v);
        }
    }
    Err(Error::InnerNewtonDivergence {
        step,
        iterations: max_inner,
        residual: r.norm(),
    })
}

/// Solves p_half = p_k + (h/2) ∇ₓH(x_k, p_half) for p_half, initial guess
/// p_k. `h` is the full step of the enclosing leapfrog stage.
pub fn inner_solve_momentum(
    sys: &HamiltonianSystem,
    x_k: &DVector<f64>,
    p_k: &DVector<f64>,
    h: f64,
    tol: f64,
    max_inner: usize,
    step: usize,
) -> Result<DVector<f64>> {
    let half = 0.5 * h;
    let n = sys.dim();
    newton_solve(
        p_k,
        tol,
        max_inner,
        step,
        |q| Ok(q - p_k - half * sys.dh_dx(x_k, q)?),
        |q| Ok(DMatrix::identity(n, n) - half * sys.mixed_second(x_k, q)?),
    )
}

/// Solves x_prev = x_k − (h/2)(∇ₚH(x_k, p_half) + ∇ₚH(x_prev, p_half)) for
/// x_prev, initial guess x_k.
pub fn inner_solve_position(
    sys: &HamiltonianSystem,
    x_k: &DVector<f64>,
    p_half: &DVector<f64>,
    h: f64,
    tol: f64,
    max_inner: usize,
    step: usize,
) -> Result<DVector<f64>> {
    let half = 0.5 * h;
    let n = sys.dim();
    let fixed = x_k - half * sys.dh_dp(x_k, p_half)?;
    newton_solve(
        x_k,
        tol,
        max_inner,
        step,
        |xi| Ok(xi - &fixed + half * sys.dh_dp(xi, p_half)?),
        |xi| Ok(DMatrix::identity(n, n) + half * sys.mixed_second(xi, p_half)?.transpose()),
    )
}

/// One backward step of size h from (x_k, p_k). Returns the new phase point
/// and the half-step momentum it used.
pub fn step_backward(
    sys: &HamiltonianSystem,
    x_k: &DVector<f64>,
    p_k: &DVector<f64>,
    h: f64,
    tol: f64,
    max_inner: usize,
    step: usize,
) -> Result<(PhasePoint, DVector<f64>)> {
    let p_half = inner_solve_momentum(sys, x_k, p_k, h, tol, max_inner, step)?;
    let x_prev = inner_solve_position(sys, x_k, &p_half, h, tol, max_inner, step)?;
    sys.model().domain().check(&x_prev)?;
    let p_prev = &p_half + 0.5 * h * sys.dh_dx(&x_prev, &p_half)?;
    Ok((PhasePoint { x: x_prev, p: p_prev }, p_half))
}

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_INNER: usize = 20;

fn integrate_raw(
    sys: &HamiltonianSystem,
    y: &DVector<f64>,
    steps: usize,
    h: f64,
    tol: f64,
    max_inner: usize,
) -> Result<(Vec<PhasePoint>, Vec<DVector<f64>>)> {
    let n = sys.dim();
    sys.model().domain().check(y)?;
    let terminal = PhasePoint {
        x: y.clone(),
        p: DVector::zeros(n),
    };
    let mut states = vec![terminal; steps + 1];
    let mut half_momenta = vec![DVector::zeros(n); steps];
    for k in (1..=steps).rev() {
        let (prev, p_half) =
            step_backward(sys, &states[k].x, &states[k].p, h, tol, max_inner, k)?;
        states[k - 1] = prev;
        half_momenta[k - 1] = p_half;
    }
    Ok((states, half_momenta))
}

/// Integrates the characteristic ending at (y, 0) backward over `grid`.
///
/// The terminal state is stored exactly as given, never recomputed. By
/// default the sweep runs internally at step h/2 and exposes every other
/// fine node as the grid, so `midpoints` carries true mid-interval phase
/// points for higher-order quadrature downstream; `integrate_backward_raw`
/// skips the refinement and returns the bare scheme on the grid itself.
pub fn integrate_backward(
    sys: &HamiltonianSystem,
    y: &DVector<f64>,
    grid: &TimeGrid,
    tol: f64,
    max_inner: usize,
) -> Result<PhaseTrajectory> {
    let (fine_states, _) = integrate_raw(sys, y, 2 * grid.n, 0.5 * grid.h, tol, max_inner)?;
    let states: Vec<PhasePoint> = (0..=grid.n).map(|k| fine_states[2 * k].clone()).collect();
    let midpoints: Vec<PhasePoint> =
        (0..grid.n).map(|k| fine_states[2 * k + 1].clone()).collect();
    let half_momenta = midpoints.iter().map(|m| m.p.clone()).collect();
    Ok(PhaseTrajectory {
        grid: *grid,
        states,
        half_momenta,
        midpoints: Some(midpoints),
        terminal_y: y.clone(),
    })
}

/// The unrefined scheme on the grid nodes themselves; `half_momenta` holds
/// the implicit-stage momenta and no midpoint states are available.
pub fn integrate_backward_raw(
    sys: &HamiltonianSystem,
    y: &DVector<f64>,
    grid: &TimeGrid,
    tol: f64,
    max_inner: usize,
) -> Result<PhaseTrajectory> {
    let (states, half_momenta) = integrate_raw(sys, y, grid.n, grid.h, tol, max_inner)?;
    Ok(PhaseTrajectory {
        grid: *grid,
        states,
        half_momenta,
        midpoints: None,
        terminal_y: y.clone(),
    })
}

/// max_k |H(x̂_k, p̂_k) − H(x̂_N, p̂_N)| over the trajectory nodes. H is a
/// first integral of the exact flow, so this measures integration quality;
/// for a symplectic scheme it stays O(h²) uniformly.
pub fn hamiltonian_drift_diagnostic(
    sys: &HamiltonianSystem,
    traj: &PhaseTrajectory,
) -> Result<f64> {
    let last = traj.states.last().expect("trajectory has at least one node");
    let h_terminal = sys.h_value(&last.x, &last.p)?;
    let mut worst = 0.0f64;
    for state in &traj.states {
        let h_k = sys.h_value(&state.x, &state.p)?;
        worst = worst.max((h_k - h_terminal).abs());
    }
    Ok(worst)
}
