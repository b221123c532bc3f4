//! The velocity field induced by a convex potential and its scalar
//! potential.
//!
//! A potential `Ψ` moves `z₀` to `∇Ψ(z₀)` along a straight line; at an
//! interior point `x` at time `t` the trajectory start is recovered as
//! `z₀ = ∇φ̄_t(x)` and the velocity is `∇Ψ(z₀) − z₀`. The velocity is the
//! spatial gradient of the scalar potential
//!
//! `s_t(x) = ‖x‖²/(2t) − φ̄_t(x)/t`,
//!
//! whose time derivative is `−½‖x − z₀‖²/t² = −½‖velocity‖²`. Consequently
//! `½‖∇s_t‖² + ∂s_t/∂t ≡ 0`; [`bracket`] exposes that combination and
//! [`bracket_fd_audit`] recomputes it purely from finite differences of
//! [`s_eval`] so tests can audit the identity without trusting the analytic
//! path.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate::{
    conjugate_time_scaled, recover_z0, ConjugateError, SolverSettings, TimeScaledPotential,
};
use crate::potentials::ConvexPotential;

/// Below this time the corner formula `s_0(x) = Ψ(x) − ‖x‖²/2` replaces the
/// general expression, which divides by `t`.
pub const CORNER_TIME: f64 = 1e-6;

/// Everything the field knows at one `(t, x)`: computed from a single
/// conjugate solve so the identities hold exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    /// `u_t(x) = ∇Ψ(z₀) − z₀`.
    pub velocity: DVector<f64>,
    /// `s_t(x)`.
    pub s_value: f64,
    /// `∂s_t/∂t (x) = −½‖velocity‖²`.
    pub s_dt: f64,
    /// The recovered trajectory start.
    pub z0: DVector<f64>,
}

/// Fixed-step ODE scheme for [`pushforward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Euler,
    Rk4,
}

/// The gradient selection consistent with the conjugate's stationarity
/// condition: inside a kink fan (where `z₀` sits on a max-affine kink for a
/// positive-measure set of `x`) the scalar potential is still differentiable
/// and its gradient weights the active rows by the simplex multipliers;
/// the single-row subgradient would disagree with `∇s` there.
pub(crate) fn selected_gradient(
    psi: &ConvexPotential,
    z0: &DVector<f64>,
    multipliers: Option<&[(usize, f64)]>,
) -> DVector<f64> {
    match (psi, multipliers) {
        (ConvexPotential::RegularizedMaxAffine(m), Some(weights)) => {
            let mut g = z0 * m.strength();
            for &(k, weight) in weights {
                g += m.slopes().row(k).transpose() * weight;
            }
            g
        }
        _ => psi.grad(z0),
    }
}

/// Evaluates velocity, scalar potential, and its time derivative at `(t, x)`
/// with one conjugate solve.
pub fn field_eval(
    psi: &ConvexPotential,
    t: f64,
    x: &DVector<f64>,
    cfg: &SolverSettings,
) -> Result<FieldEval, ConjugateError> {
    assert!((0.0..=1.0).contains(&t), "time must lie in [0,1], got {t}");
    if t < CORNER_TIME {
        let z0 = x.clone();
        let velocity = psi.grad(&z0) - &z0;
        let s_value = psi.eval(x) - 0.5 * x.norm_squared();
        let s_dt = -0.5 * velocity.norm_squared();
        return Ok(FieldEval {
            velocity,
            s_value,
            s_dt,
            z0,
        });
    }
    let phi = TimeScaledPotential::new(psi, t);
    let conj = conjugate_time_scaled(&phi, x, cfg)?;
    let z0 = conj.argmax;
    let velocity = selected_gradient(psi, &z0, conj.multipliers.as_deref()) - &z0;
    let s_value = x.norm_squared() / (2.0 * t) - conj.value / t;
    let s_dt = -0.5 * velocity.norm_squared();
    Ok(FieldEval {
        velocity,
        s_value,
        s_dt,
        z0,
    })
}

/// `u_t(x) = ∇Ψ(z₀) − z₀` with `z₀ = ∇φ̄_t(x)`. Never divides by `t`, so
/// the expression is regular on all of `[0,1]`.
pub fn field_velocity(
    psi: &ConvexPotential,
    t: f64,
    x: &DVector<f64>,
    cfg: &SolverSettings,
) -> Result<DVector<f64>, ConjugateError> {
    field_eval(psi, t, x, cfg).map(|fe| fe.velocity)
}

/// `s_t(x)`, with the corner formulas at the ends of the interval:
/// `s_0 = Ψ − ‖·‖²/2` and `s_1 = ‖·‖²/2 − Ψ̄`.
pub fn s_eval(
    psi: &ConvexPotential,
    t: f64,
    x: &DVector<f64>,
    cfg: &SolverSettings,
) -> Result<f64, ConjugateError> {
    field_eval(psi, t, x, cfg).map(|fe| fe.s_value)
}

/// `∂s_t/∂t (x)`, analytic: `−½‖u_t(x)‖²`.
pub fn s_time_derivative(
    psi: &ConvexPotential,
    t: f64,
    x: &DVector<f64>,
    cfg: &SolverSettings,
) -> Result<f64, ConjugateError> {
    field_eval(psi, t, x, cfg).map(|fe| fe.s_dt)
}

/// `½‖∇s_t(x)‖² + ∂s_t/∂t (x)`. Identically zero for these fields; both
/// terms come from the same velocity vector, so the cancellation is exact in
/// floating point as well.
pub fn bracket(
    psi: &ConvexPotential,
    t: f64,
    x: &DVector<f64>,
    cfg: &SolverSettings,
) -> Result<f64, ConjugateError> {
    let fe = field_eval(psi, t, x, cfg)?;
    Ok(0.5 * fe.velocity.norm_squared() + fe.s_dt)
}

/// The bracket recomputed entirely from central differences of [`s_eval`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdBracket {
    pub value: f64,
    /// True when the finite-difference stencil straddles a change of the
    /// max-affine active set, where one-sided behavior spoils the audit.
    pub stencil_crosses_kink: bool,
}

/// Audits the bracket identity numerically: `∇s` by central differences in
/// each coordinate, `∂s/∂t` by a central difference in `t`, no analytic
/// derivatives involved.
pub fn bracket_fd_audit(
    psi: &ConvexPotential,
    t: f64,
    x: &DVector<f64>,
    h_x: f64,
    h_t: f64,
    cfg: &SolverSettings,
) -> Result<FdBracket, ConjugateError> {
    let d = x.len();
    let active = |t: f64, pt: &DVector<f64>| -> Result<Option<Vec<usize>>, ConjugateError> {
        match psi {
            ConvexPotential::Quadratic(_) => Ok(None),
            ConvexPotential::RegularizedMaxAffine(m) => {
                let z0 = recover_z0(psi, t, pt, cfg)?;
                Ok(Some(m.active_set(&z0, 1e-9)))
            }
        }
    };

    let center_set = active(t, x)?;
    let mut crosses = false;
    let check = |set: Option<Vec<usize>>, crosses: &mut bool| {
        if set != center_set {
            *crosses = true;
        }
    };

    let mut grad_sq = 0.0;
    for i in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h_x;
        xm[i] -= h_x;
        check(active(t, &xp)?, &mut crosses);
        check(active(t, &xm)?, &mut crosses);
        let ds = (s_eval(psi, t, &xp, cfg)? - s_eval(psi, t, &xm, cfg)?) / (2.0 * h_x);
        grad_sq += ds * ds;
    }

    let tp = (t + h_t).min(1.0);
    let tm = (t - h_t).max(0.0);
    check(active(tp, x)?, &mut crosses);
    check(active(tm, x)?, &mut crosses);
    let s_dt = (s_eval(psi, tp, x, cfg)? - s_eval(psi, tm, x, cfg)?) / (tp - tm);

    Ok(FdBracket {
        value: 0.5 * grad_sq + s_dt,
        stencil_crosses_kink: crosses,
    })
}

/// Integrates `dx/dt = u_t(x)` from `t = 0` to `1` for every row of `x0`.
/// The trajectories of these fields are straight lines with constant
/// velocity, so the result must reproduce `∇Ψ(x₀)` up to solver tolerance;
/// the integrator exists as an end-to-end consistency check of the field at
/// interior times. Rows integrate independently in parallel.
pub fn pushforward(
    psi: &ConvexPotential,
    x0: &DMatrix<f64>,
    steps: usize,
    method: OdeMethod,
    cfg: &SolverSettings,
) -> Result<DMatrix<f64>, ConjugateError> {
    assert!(steps >= 1, "pushforward needs steps >= 1");
    let d = x0.ncols();
    let dt = 1.0 / steps as f64;
    let velocity = |t: f64, x: &DVector<f64>| field_velocity(psi, t.min(1.0), x, cfg);

    let rows: Vec<DVector<f64>> = (0..x0.nrows())
        .into_par_iter()
        .map(|r| {
            let mut x = x0.row(r).transpose().clone_owned();
            let mut t = 0.0;
            for _ in 0..steps {
                match method {
                    OdeMethod::Euler => {
                        let v = velocity(t, &x)?;
                        x += v * dt;
                    }
                    OdeMethod::Rk4 => {
                        let k1 = velocity(t, &x)?;
                        let k2 = velocity(t + 0.5 * dt, &(&x + &k1 * (0.5 * dt)))?;
                        let k3 = velocity(t + 0.5 * dt, &(&x + &k2 * (0.5 * dt)))?;
                        let k4 = velocity(t + dt, &(&x + &k3 * dt))?;
                        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
                    }
                }
                t += dt;
            }
            Ok(x)
        })
        .collect::<Result<_, ConjugateError>>()?;

    let mut out = DMatrix::zeros(x0.nrows(), d);
    for (r, row) in rows.iter().enumerate() {
        out.set_row(r, &row.transpose());
    }
    Ok(out)
}
