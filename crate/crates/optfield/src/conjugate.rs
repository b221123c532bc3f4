//! Convex conjugates (Legendre transforms) of the potential families.
//!
//! The conjugate `Ψ̄(y) = sup_z [⟨y,z⟩ − Ψ(z)]` is attained for every `y`
//! because both families are strongly convex. The quadratic family is solved
//! in closed form with one Cholesky solve. The max-affine family maximizes
//! the strongly concave `g(z) = ⟨y,z⟩ − Ψ(z)` by Armijo-backtracked gradient
//! ascent, combined with exact active-set solves: at each iterate the rows
//! near the current maximum are tested as a candidate active set, and a
//! candidate that passes the global optimality certificate (stationarity
//! with simplex multipliers plus feasibility of every other row) is returned
//! exactly. Plain ascent alone cannot drive the pointwise gradient norm to
//! tolerance when the maximizer sits on a kink of the max-affine term, which
//! happens for a positive-measure set of inputs.
//!
//! [`TimeScaledPotential`] is the blend `φ_t = tΨ + (1−t)‖·‖²/2`; its
//! conjugate gradient recovers the trajectory start `z₀` from an interior
//! point ([`recover_z0`]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::potentials::ConvexPotential;

/// Stopping settings for the iterative conjugate solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Stationarity tolerance on `‖∇g‖` (or the active-set residual).
    pub tol: f64,
    /// Maximum accepted ascent steps.
    pub max_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 500,
        }
    }
}

/// Value and maximizer of a conjugate evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateResult {
    /// `Ψ̄(y)` (or `φ̄_t(y)`).
    pub value: f64,
    /// The maximizer `z*`.
    pub argmax: DVector<f64>,
    /// Accepted ascent steps (0 for closed-form solves).
    pub iterations: usize,
    /// Stationarity residual at `argmax`.
    pub grad_norm: f64,
    /// For max-affine targets, the rows active at the maximizer with their
    /// simplex weights (the subgradient selection that makes `y − s·z*` a
    /// convex combination of slopes). `None` for quadratic closed forms.
    pub multipliers: Option<Vec<(usize, f64)>>,
}

#[derive(Debug, Error)]
pub enum ConjugateError {
    /// The iteration budget ran out; carries the best iterate so the caller
    /// can decide whether to accept it.
    #[error("conjugate solver hit max_iters with grad_norm {}", .best.grad_norm)]
    MaxIters { best: ConjugateResult },
}

impl ConjugateError {
    pub fn best(&self) -> &ConjugateResult {
        match self {
            Self::MaxIters { best } => best,
        }
    }

    pub fn into_best(self) -> ConjugateResult {
        match self {
            Self::MaxIters { best } => best,
        }
    }
}

/// `φ_t(z) = t·Ψ(z) + (1−t)·‖z‖²/2`, strongly convex for all `t ∈ [0,1]`
/// with modulus `(1−t) + t·μ` where `μ` is the base family's modulus.
#[derive(Debug, Clone, Copy)]
pub struct TimeScaledPotential<'a> {
    base: &'a ConvexPotential,
    t: f64,
}

impl<'a> TimeScaledPotential<'a> {
    pub fn new(base: &'a ConvexPotential, t: f64) -> Self {
        assert!((0.0..=1.0).contains(&t), "time must lie in [0,1], got {t}");
        Self { base, t }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn base(&self) -> &ConvexPotential {
        self.base
    }

    pub fn eval(&self, z: &DVector<f64>) -> f64 {
        self.t * self.base.eval(z) + (1.0 - self.t) * 0.5 * z.norm_squared()
    }

    pub fn grad(&self, z: &DVector<f64>) -> DVector<f64> {
        self.base.grad(z) * self.t + z * (1.0 - self.t)
    }

    pub fn strong_convexity(&self) -> f64 {
        (1.0 - self.t) + self.t * self.base.strong_convexity()
    }
}

/// `Ψ̄(y)` with the maximizer.
pub fn conjugate(
    f: &ConvexPotential,
    y: &DVector<f64>,
    cfg: &SolverSettings,
) -> Result<ConjugateResult, ConjugateError> {
    assert!(
        y.iter().all(|v| v.is_finite()),
        "conjugate input must be finite"
    );
    match f {
        ConvexPotential::Quadratic(q) => {
            let rhs = y - q.shift();
            let argmax = q.solve(&rhs);
            Ok(finish_quadratic(q.matrix(), &rhs, q.offset(), argmax))
        }
        ConvexPotential::RegularizedMaxAffine(m) => {
            iso_max_affine_conjugate(m.strength(), m.slopes(), m.intercepts(), y, cfg)
        }
    }
}

/// `φ̄_t(y)` for the blended potential.
pub fn conjugate_time_scaled(
    phi: &TimeScaledPotential<'_>,
    y: &DVector<f64>,
    cfg: &SolverSettings,
) -> Result<ConjugateResult, ConjugateError> {
    assert!(
        y.iter().all(|v| v.is_finite()),
        "conjugate input must be finite"
    );
    let t = phi.t;
    match phi.base {
        ConvexPotential::Quadratic(q) => {
            let d = y.len();
            let a_t = q.matrix() * t + DMatrix::identity(d, d) * (1.0 - t);
            let chol = nalgebra::Cholesky::new(a_t.clone())
                .expect("tA + (1-t)I is positive definite for t in [0,1]");
            let rhs = y - q.shift() * t;
            let argmax = chol.solve(&rhs);
            Ok(finish_quadratic(&a_t, &rhs, t * q.offset(), argmax))
        }
        ConvexPotential::RegularizedMaxAffine(m) => {
            let s = t * m.strength() + (1.0 - t);
            let slopes = m.slopes() * t;
            let intercepts = m.intercepts() * t;
            iso_max_affine_conjugate(s, &slopes, &intercepts, y, cfg)
        }
    }
}

/// Recovers the trajectory start `z₀ = ∇φ̄_t(x_t)`, the unique point with
/// `t∇Ψ(z₀) + (1−t)z₀ = x_t`. Returns `x_t` itself at `t = 0`.
pub fn recover_z0(
    psi: &ConvexPotential,
    t: f64,
    x_t: &DVector<f64>,
    cfg: &SolverSettings,
) -> Result<DVector<f64>, ConjugateError> {
    if t == 0.0 {
        return Ok(x_t.clone());
    }
    let phi = TimeScaledPotential::new(psi, t);
    conjugate_time_scaled(&phi, x_t, cfg).map(|r| r.argmax)
}

/// Closed form for `f(z) = ½zᵀAz + bᵀz + c` given `rhs = y − b` and the
/// solved `argmax = A⁻¹ rhs`: value `½·rhs·argmax − c`.
fn finish_quadratic(
    a: &DMatrix<f64>,
    rhs: &DVector<f64>,
    c: f64,
    argmax: DVector<f64>,
) -> ConjugateResult {
    let residual = (rhs - a * &argmax).norm();
    ConjugateResult {
        value: 0.5 * rhs.dot(&argmax) - c,
        argmax,
        iterations: 0,
        grad_norm: residual,
        multipliers: None,
    }
}

/// Maximizes `g(z) = ⟨y,z⟩ − (s/2)‖z‖² − max_k(slopes_k·z + intercepts_k)`.
fn iso_max_affine_conjugate(
    s: f64,
    slopes: &DMatrix<f64>,
    intercepts: &DVector<f64>,
    y: &DVector<f64>,
    cfg: &SolverSettings,
) -> Result<ConjugateResult, ConjugateError> {
    const ARMIJO_SLOPE: f64 = 1e-4;
    const MAX_BACKTRACKS: usize = 60;
    // Rows within this relative gap of the leading face form the candidate
    // active set for the exact solves.
    const ACTIVE_WINDOW: f64 = 1e-3;
    const MAX_ACTIVE: usize = 6;

    let k_rows = slopes.nrows();
    let face = |z: &DVector<f64>| -> (usize, f64, Vec<f64>) {
        let mut vals = Vec::with_capacity(k_rows);
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for k in 0..k_rows {
            let v = slopes.row(k).transpose().dot(z) + intercepts[k];
            if v > best_val {
                best_val = v;
                best = k;
            }
            vals.push(v);
        }
        (best, best_val, vals)
    };
    let g = |z: &DVector<f64>| -> f64 {
        let (_, m, _) = face(z);
        y.dot(z) - 0.5 * s * z.norm_squared() - m
    };

    // Rows sorted by activity at `z`, optionally filtered to a window below
    // the leading face.
    let candidate_rows = |vals: &[f64], face_max: f64, window: Option<f64>| -> Vec<usize> {
        let mut rows: Vec<usize> = match window {
            Some(w) => (0..k_rows)
                .filter(|&k| face_max - vals[k] <= w * (1.0 + face_max.abs()))
                .collect(),
            None => (0..k_rows).collect(),
        };
        rows.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
        rows.truncate(MAX_ACTIVE);
        rows
    };

    let mut z = y.clone();
    let mut g_z = g(&z);
    let mut iterations = 0usize;

    for _ in 0..cfg.max_iters.max(1) {
        let (k_star, face_max, vals) = face(&z);

        let active = candidate_rows(&vals, face_max, Some(ACTIVE_WINDOW));
        if let Some(mut exact) = snap_search(s, slopes, intercepts, y, &active, cfg.tol) {
            exact.iterations = iterations;
            return Ok(exact);
        }

        let grad = y - &z * s - slopes.row(k_star).transpose();
        let gnorm = grad.norm();
        if gnorm <= cfg.tol {
            return Ok(ConjugateResult {
                value: g_z,
                argmax: z,
                iterations,
                grad_norm: gnorm,
                multipliers: Some(vec![(k_star, 1.0)]),
            });
        }

        let mut step = 1.0 / s;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let z_new = &z + &grad * step;
            let g_new = g(&z_new);
            if g_new >= g_z + ARMIJO_SLOPE * step * gnorm * gnorm {
                z = z_new;
                g_z = g_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Stalled against a kink: the optimum's active set can contain
            // rows whose face gap at the stall point exceeds the window, so
            // retry the exact solves over the most-active rows outright.
            break;
        }
        iterations += 1;
    }

    let (k_star, face_max, vals) = face(&z);
    let active = candidate_rows(&vals, face_max, None);
    if let Some(mut exact) = snap_search(s, slopes, intercepts, y, &active, cfg.tol) {
        exact.iterations = iterations;
        return Ok(exact);
    }
    let grad_norm = (y - &z * s - slopes.row(k_star).transpose()).norm();
    Err(ConjugateError::MaxIters {
        best: ConjugateResult {
            value: g_z,
            argmax: z,
            iterations,
            grad_norm,
            multipliers: Some(vec![(k_star, 1.0)]),
        },
    })
}

/// Tries every nonempty subset of `active` (smallest first) as an exact
/// active set. A verified candidate satisfies stationarity
/// `y − s·z = Σ λ_k a_k` with `λ` on the simplex and no other row above the
/// common face value, which certifies the global maximum of the concave
/// objective.
fn snap_search(
    s: f64,
    slopes: &DMatrix<f64>,
    intercepts: &DVector<f64>,
    y: &DVector<f64>,
    active: &[usize],
    tol: f64,
) -> Option<ConjugateResult> {
    let m_total = active.len();
    if m_total == 0 {
        return None;
    }
    let mut subsets: Vec<Vec<usize>> = Vec::new();
    for mask in 1u32..(1 << m_total) {
        let subset: Vec<usize> = (0..m_total)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| active[i])
            .collect();
        subsets.push(subset);
    }
    subsets.sort_by_key(Vec::len);

    for subset in &subsets {
        if let Some(result) = snap_try(s, slopes, intercepts, y, subset, tol) {
            return Some(result);
        }
    }
    None
}

fn snap_try(
    s: f64,
    slopes: &DMatrix<f64>,
    intercepts: &DVector<f64>,
    y: &DVector<f64>,
    subset: &[usize],
    tol: f64,
) -> Option<ConjugateResult> {
    const FEAS_TOL: f64 = 1e-12;
    let d = y.len();
    let m = subset.len();

    let (z, lambda) = if m == 1 {
        // Interior-cell candidate: the unconstrained maximum of this cell's
        // smooth model.
        let k = subset[0];
        let z = (y - slopes.row(k).transpose()) / s;
        (z, vec![1.0])
    } else {
        // Stationarity on the kink manifold of the subset:
        //   s·z + Σ λ_k a_k = y,  rows of the subset tie,  Σ λ = 1.
        let n = d + m;
        let mut mat = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for i in 0..d {
            mat[(i, i)] = s;
            for (j, &k) in subset.iter().enumerate() {
                mat[(i, d + j)] = slopes[(k, i)];
            }
            rhs[i] = y[i];
        }
        let k0 = subset[0];
        for (j, &k) in subset.iter().enumerate().skip(1) {
            for i in 0..d {
                mat[(d + j - 1, i)] = slopes[(k, i)] - slopes[(k0, i)];
            }
            rhs[d + j - 1] = intercepts[k0] - intercepts[k];
        }
        for j in 0..m {
            mat[(d + m - 1, d + j)] = 1.0;
        }
        rhs[d + m - 1] = 1.0;

        let sol = mat.lu().solve(&rhs)?;
        let z = DVector::from_fn(d, |i, _| sol[i]);
        let lambda: Vec<f64> = (0..m).map(|j| sol[d + j]).collect();
        (z, lambda)
    };

    if z.iter().any(|v| !v.is_finite()) || lambda.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if lambda.iter().any(|&l| l < -1e-10) {
        return None;
    }

    // Every row must sit at or below the subset's face value.
    let face: f64 = subset
        .iter()
        .map(|&k| slopes.row(k).transpose().dot(&z) + intercepts[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = 1.0 + face.abs();
    for k in 0..slopes.nrows() {
        let v = slopes.row(k).transpose().dot(&z) + intercepts[k];
        if v > face + FEAS_TOL * scale {
            return None;
        }
    }

    let mut residual = y - &z * s;
    for (j, &k) in subset.iter().enumerate() {
        residual -= slopes.row(k).transpose() * lambda[j];
    }
    let grad_norm = residual.norm();
    if grad_norm > tol {
        return None;
    }

    let value = y.dot(&z) - 0.5 * s * z.norm_squared() - face;
    let multipliers = subset
        .iter()
        .zip(&lambda)
        .map(|(&k, &l)| (k, l.max(0.0)))
        .collect();
    Some(ConjugateResult {
        value,
        argmax: z,
        iterations: 0,
        grad_norm,
        multipliers: Some(multipliers),
    })
}
