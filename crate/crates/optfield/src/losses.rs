//! Monte Carlo estimators of the transport losses.
//!
//! Four losses are estimated, all over the same potential families:
//!
//! - `ot_loss`: the dual objective `E_{p0}[Ψ] + E_{p1}[Ψ̄]`;
//! - `fm_loss`: the flow-matching objective
//!   `∫∫ ‖u_t(x_t) − (x₁−x₀)‖² dπ dt` for an arbitrary velocity function,
//!   with `x_t` on the straight line between the pair;
//! - `ofm_loss`: `fm_loss` specialized to the optimal field of a potential;
//! - `am_loss`: endpoint terms `E_{p0}[s₀] − E_{p1}[s₁]` plus the time
//!   integral of `½‖∇s_t‖² + ∂s_t/∂t` along an interpolating path.
//!
//! Every estimator derives its sample streams from `(seed, fixed tag)`, so
//! two estimators called with one seed share no randomness, while calls for
//! different potentials reuse identical samples (common random numbers).
//! Sampling happens up front on one thread; the parallel phase evaluates
//! integrands into an index-ordered buffer that is reduced sequentially, so
//! results are bit-identical for every thread count.
//!
//! Time integrals draw stratified times `t_i = (i+0.5)/n`, shuffled before
//! pairing with the sample rows.
//!
//! A conjugate solve that runs out of iterations is accepted with a warning
//! while its residual stays at or below [`CONJUGATE_GATE`]; a worse residual
//! aborts the whole estimate rather than biasing it silently.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conjugate::{conjugate, ConjugateResult, SolverSettings, TimeScaledPotential};
use crate::couplings::{PathSpec, PlanError, PlanSpec};
use crate::distributions::Distribution;
use crate::optimal_fields::{FieldEval, CORNER_TIME};
use crate::potentials::{ConvexPotential, ParamVector};
use crate::rng::{self, tags};

/// Residual gate for accepting an out-of-budget conjugate iterate.
pub const CONJUGATE_GATE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("conjugate solve at sample {index} failed the gate: grad_norm {grad_norm}")]
    ConjugateGate { index: usize, grad_norm: f64 },
    #[error("estimator needs n >= 2, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite integrand at sample {index}")]
    NonFinite { index: usize },
    #[error("analytic gradient is not available for this potential family")]
    GradientUnsupported,
    #[error(transparent)]
    Plan(#[from] PlanError),
}

impl LossError {
    fn with_index(self, index: usize) -> Self {
        match self {
            Self::ConjugateGate { grad_norm, .. } => Self::ConjugateGate { index, grad_norm },
            Self::NonFinite { .. } => Self::NonFinite { index },
            other => other,
        }
    }
}

/// A Monte Carlo estimate with its standard error
/// (`sample std of the integrand / √n`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl LossEstimate {
    /// Standard error of a sum of independent estimates.
    pub fn combined_std_error(parts: &[&LossEstimate]) -> f64 {
        parts
            .iter()
            .map(|p| p.std_error * p.std_error)
            .sum::<f64>()
            .sqrt()
    }
}

/// The action-matching estimate with its three independently sampled terms.
/// `endpoint1` carries the sign with which it enters the total, i.e. it
/// estimates `−E_{p1}[s₁]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmLossReport {
    pub total: LossEstimate,
    pub endpoint0: LossEstimate,
    pub endpoint1: LossEstimate,
    pub interior: LossEstimate,
}

/// A named loss estimate in the documented report shape:
/// `{loss, value, std_error, n, seed, terms{...}}`, where `terms` carries
/// the separately estimated components when the loss has any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: String,
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub terms: std::collections::BTreeMap<String, LossEstimate>,
}

impl LossReport {
    pub fn new(loss: impl Into<String>, estimate: &LossEstimate) -> Self {
        Self {
            loss: loss.into(),
            value: estimate.value,
            std_error: estimate.std_error,
            n: estimate.n_samples,
            seed: estimate.seed,
            terms: Default::default(),
        }
    }

    pub fn from_am(loss: impl Into<String>, report: &AmLossReport) -> Self {
        let mut named = Self::new(loss, &report.total);
        named
            .terms
            .insert("endpoint0".into(), report.endpoint0.clone());
        named
            .terms
            .insert("endpoint1".into(), report.endpoint1.clone());
        named
            .terms
            .insert("interior".into(), report.interior.clone());
        named
    }
}

fn summarize(values: Vec<f64>, n: usize, seed: u64) -> Result<LossEstimate, LossError> {
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(LossError::NonFinite { index });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    Ok(LossEstimate {
        value: mean,
        std_error: (var / n as f64).sqrt(),
        n_samples: n,
        seed,
    })
}

/// Stratified times `(i + 0.5)/n` in shuffled order.
fn stratified_times(n: usize, seed: u64) -> Vec<f64> {
    let mut ts: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    ts.shuffle(&mut rng::stream(seed));
    ts
}

fn gate(
    result: Result<ConjugateResult, crate::conjugate::ConjugateError>,
) -> Result<ConjugateResult, LossError> {
    match result {
        Ok(r) => Ok(r),
        Err(err) => {
            let best = err.into_best();
            if best.grad_norm <= CONJUGATE_GATE {
                log::warn!(
                    "conjugate hit max_iters; accepting iterate with grad_norm {:.3e}",
                    best.grad_norm
                );
                Ok(best)
            } else {
                Err(LossError::ConjugateGate {
                    index: 0,
                    grad_norm: best.grad_norm,
                })
            }
        }
    }
}

fn gated_conjugate(
    psi: &ConvexPotential,
    y: &DVector<f64>,
    cfg: &SolverSettings,
) -> Result<ConjugateResult, LossError> {
    gate(conjugate(psi, y, cfg))
}

/// [`crate::optimal_fields::field_eval`] with the residual gate applied to
/// the underlying conjugate solve.
fn gated_field_eval(
    psi: &ConvexPotential,
    t: f64,
    x: &DVector<f64>,
    cfg: &SolverSettings,
) -> Result<FieldEval, LossError> {
    if t < CORNER_TIME {
        // No conjugate solve on this branch; it cannot fail.
        return Ok(crate::optimal_fields::field_eval(psi, t, x, cfg).expect("corner branch"));
    }
    let phi = TimeScaledPotential::new(psi, t);
    let conj = gate(crate::conjugate::conjugate_time_scaled(&phi, x, cfg))?;
    let multipliers = conj.multipliers;
    let z0 = conj.argmax;
    let velocity = crate::optimal_fields::selected_gradient(psi, &z0, multipliers.as_deref()) - &z0;
    let s_value = x.norm_squared() / (2.0 * t) - conj.value / t;
    let s_dt = -0.5 * velocity.norm_squared();
    Ok(FieldEval {
        velocity,
        s_value,
        s_dt,
        z0,
    })
}

/// `∂θΨ(z)` with the max-affine row derivative spread over the active rows
/// according to the conjugate's simplex multipliers. Off kinks this is
/// exactly `param_grad`; on kinks it is the actual derivative of the
/// conjugate value, where a single-row subgradient would be biased.
fn param_grad_at_argmax(psi: &ConvexPotential, conj: &ConjugateResult) -> ParamVector {
    match (psi, &conj.multipliers) {
        (ConvexPotential::RegularizedMaxAffine(m), Some(weights)) => {
            let (k_rows, d) = m.slopes().shape();
            let mut g = DVector::zeros(psi.param_len());
            for &(k, w) in weights {
                for c in 0..d {
                    g[k * d + c] += w * conj.argmax[c];
                }
                g[k_rows * d + k] += w;
            }
            ParamVector(g)
        }
        _ => psi.param_grad(&conj.argmax),
    }
}

/// The dual transport objective `E_{p0}[Ψ(x₀)] + E_{p1}[Ψ̄(x₁)]`, the two
/// expectations estimated from independent streams derived from `seed`.
pub fn ot_loss(
    psi: &ConvexPotential,
    p0: &Distribution,
    p1: &Distribution,
    n: usize,
    seed: u64,
    cfg: &SolverSettings,
) -> Result<LossEstimate, LossError> {
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    let x0 = p0.sample(n, rng::derive(seed, tags::OT_SOURCE));
    let x1 = p1.sample(n, rng::derive(seed, tags::OT_TARGET));

    let direct: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| psi.eval(&x0.row(i).transpose()))
        .collect();
    let conjugated: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            gated_conjugate(psi, &x1.row(i).transpose(), cfg)
                .map(|r| r.value)
                .map_err(|e| e.with_index(i))
        })
        .collect::<Result<_, _>>()?;

    let e0 = summarize(direct, n, seed)?;
    let e1 = summarize(conjugated, n, seed)?;
    Ok(LossEstimate {
        value: e0.value + e1.value,
        std_error: e0.std_error.hypot(e1.std_error),
        n_samples: n,
        seed,
    })
}

/// Parameter gradient of [`ot_loss`]: the maximizer inside the conjugate is
/// treated as fixed (its derivative vanishes at the maximum), leaving
/// `E[∂θΨ(x₀)] − E[∂θΨ(z*(x₁))]`. Shares sample streams with `ot_loss`.
pub fn ot_loss_grad(
    psi: &ConvexPotential,
    p0: &Distribution,
    p1: &Distribution,
    n: usize,
    seed: u64,
    cfg: &SolverSettings,
) -> Result<ParamVector, LossError> {
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    let x0 = p0.sample(n, rng::derive(seed, tags::OT_SOURCE));
    let x1 = p1.sample(n, rng::derive(seed, tags::OT_TARGET));

    let parts: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<DVector<f64>, LossError> {
            let direct = psi.param_grad(&x0.row(i).transpose());
            let conj =
                gated_conjugate(psi, &x1.row(i).transpose(), cfg).map_err(|e| e.with_index(i))?;
            Ok(direct.0 - param_grad_at_argmax(psi, &conj).0)
        })
        .collect::<Result<_, _>>()?;

    let mut g = DVector::zeros(psi.param_len());
    for p in &parts {
        g += p;
    }
    Ok(ParamVector(g / n as f64))
}

/// The flow-matching objective for an arbitrary velocity function, with the
/// intermediate point on the straight line between the coupled pair.
pub fn fm_loss<F>(field: F, plan: &PlanSpec, n: usize, seed: u64) -> Result<LossEstimate, LossError>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>, LossError> + Sync,
{
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    let (x0, x1) = plan.sample_pairs(n, rng::derive(seed, tags::PAIR_SAMPLE))?;
    let ts = stratified_times(n, rng::derive(seed, tags::TIME_SHUFFLE));

    let integrand: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64, LossError> {
            let a = x0.row(i).transpose();
            let b = x1.row(i).transpose();
            let t = ts[i];
            let x_t = &a * (1.0 - t) + &b * t;
            let u = field(t, &x_t).map_err(|e| e.with_index(i))?;
            Ok((u - (b - a)).norm_squared())
        })
        .collect::<Result<_, _>>()?;

    summarize(integrand, n, seed)
}

/// [`fm_loss`] evaluated on the optimal field of `psi`.
pub fn ofm_loss(
    psi: &ConvexPotential,
    plan: &PlanSpec,
    n: usize,
    seed: u64,
    cfg: &SolverSettings,
) -> Result<LossEstimate, LossError> {
    fm_loss(
        |t, x| gated_field_eval(psi, t, x, cfg).map(|fe| fe.velocity),
        plan,
        n,
        seed,
    )
}

/// Parameter gradient of [`ofm_loss`] for the quadratic family, sharing its
/// sample streams. Differentiating through the recovered start `z₀` with
/// the stationarity condition of the conjugate collapses to
/// `2(u − Δ)ᵀ A_t⁻¹ ∂θ∇Ψ(z₀)` per sample, `A_t = tA + (1−t)I`.
///
/// The max-affine family is not supported here (its start point moves along
/// kink manifolds with a different derivative); callers fall back to
/// central differences.
pub fn ofm_loss_grad(
    psi: &ConvexPotential,
    plan: &PlanSpec,
    n: usize,
    seed: u64,
    _cfg: &SolverSettings,
) -> Result<ParamVector, LossError> {
    let q = match psi {
        ConvexPotential::Quadratic(q) => q,
        ConvexPotential::RegularizedMaxAffine(_) => return Err(LossError::GradientUnsupported),
    };
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    let d = psi.dim();
    let (x0, x1) = plan.sample_pairs(n, rng::derive(seed, tags::PAIR_SAMPLE))?;
    let ts = stratified_times(n, rng::derive(seed, tags::TIME_SHUFFLE));
    let identity = DMatrix::identity(d, d);

    let parts: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<DVector<f64>, LossError> {
            let a = x0.row(i).transpose();
            let b = x1.row(i).transpose();
            let t = ts[i];
            let x_t = &a * (1.0 - t) + &b * t;

            let a_t = q.matrix() * t + &identity * (1.0 - t);
            let chol = nalgebra::Cholesky::new(a_t).expect("tA + (1-t)I is SPD");
            let z0 = chol.solve(&(&x_t - q.shift() * t));
            let u = q.matrix() * &z0 + q.shift() - &z0;
            let w = (u - (b - a)) * 2.0;
            let v = chol.solve(&w);

            let ltz = q.factor().transpose() * &z0;
            let ltv = q.factor().transpose() * &v;
            let mut g = DVector::zeros(psi.param_len());
            let mut idx = 0;
            for r in 0..d {
                for c in 0..=r {
                    g[idx] = v[r] * ltz[c] + z0[r] * ltv[c];
                    idx += 1;
                }
            }
            for r in 0..d {
                g[idx] = v[r];
                idx += 1;
            }
            // offset entry stays zero: c cancels from the velocity.
            Ok(g)
        })
        .collect::<Result<_, _>>()?;

    let mut g = DVector::zeros(psi.param_len());
    for p in &parts {
        g += p;
    }
    Ok(ParamVector(g / n as f64))
}

/// The action-matching objective of the field's scalar potential along a
/// path: endpoint expectations plus the interior time integral. The three
/// terms are estimated from independent streams; the interior integrand
/// cancels exactly per sample for these fields, so its estimate carries the
/// wiring (and the conjugate gate) but no variance.
pub fn am_loss(
    psi: &ConvexPotential,
    path: &PathSpec,
    n: usize,
    seed: u64,
    cfg: &SolverSettings,
) -> Result<AmLossReport, LossError> {
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }

    // E_{p0}[s_0], s_0(x) = Ψ(x) − ‖x‖²/2.
    let (e0_x0, _) = path
        .plan
        .sample_pairs(n, rng::derive(seed, tags::AM_ENDPOINT0))?;
    let vals0: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = e0_x0.row(i).transpose();
            psi.eval(&x) - 0.5 * x.norm_squared()
        })
        .collect();
    let endpoint0 = summarize(vals0, n, seed)?;

    // −E_{p1}[s_1], s_1(x) = ‖x‖²/2 − Ψ̄(x).
    let (_, e1_x1) = path
        .plan
        .sample_pairs(n, rng::derive(seed, tags::AM_ENDPOINT1))?;
    let vals1: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64, LossError> {
            let x = e1_x1.row(i).transpose();
            let conj = gated_conjugate(psi, &x, cfg).map_err(|e| e.with_index(i))?;
            Ok(conj.value - 0.5 * x.norm_squared())
        })
        .collect::<Result<_, _>>()?;
    let endpoint1 = summarize(vals1, n, seed)?;

    // Interior: ∫ E[½‖∇s_t‖² + ∂s_t/∂t] dt over the path's points.
    let interior_seed = rng::derive(seed, tags::AM_INTERIOR);
    let (i_x0, i_x1) = path.plan.sample_pairs(n, interior_seed)?;
    let ts = stratified_times(n, rng::derive(interior_seed, tags::TIME_SHUFFLE));
    let vals_interior: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64, LossError> {
            let t = ts[i];
            let x_t = path.interpolate(&i_x0.row(i).transpose(), &i_x1.row(i).transpose(), t);
            let fe = gated_field_eval(psi, t, &x_t, cfg).map_err(|e| e.with_index(i))?;
            Ok(0.5 * fe.velocity.norm_squared() + fe.s_dt)
        })
        .collect::<Result<_, _>>()?;
    let interior = summarize(vals_interior, n, seed)?;

    let total = LossEstimate {
        value: endpoint0.value + endpoint1.value + interior.value,
        std_error: LossEstimate::combined_std_error(&[&endpoint0, &endpoint1, &interior]),
        n_samples: n,
        seed,
    };
    Ok(AmLossReport {
        total,
        endpoint0,
        endpoint1,
        interior,
    })
}

/// Parameter gradient of [`am_loss`], sharing its endpoint sample streams.
/// The interior integrand is identically zero in the parameters, so only
/// the endpoint terms contribute; the conjugate maximizer is treated as
/// fixed, as in [`ot_loss_grad`].
pub fn am_loss_grad(
    psi: &ConvexPotential,
    path: &PathSpec,
    n: usize,
    seed: u64,
    cfg: &SolverSettings,
) -> Result<ParamVector, LossError> {
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    let (e0_x0, _) = path
        .plan
        .sample_pairs(n, rng::derive(seed, tags::AM_ENDPOINT0))?;
    let (_, e1_x1) = path
        .plan
        .sample_pairs(n, rng::derive(seed, tags::AM_ENDPOINT1))?;

    let parts: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<DVector<f64>, LossError> {
            let direct = psi.param_grad(&e0_x0.row(i).transpose());
            let conj = gated_conjugate(psi, &e1_x1.row(i).transpose(), cfg)
                .map_err(|e| e.with_index(i))?;
            Ok(direct.0 - param_grad_at_argmax(psi, &conj).0)
        })
        .collect::<Result<_, _>>()?;

    let mut g = DVector::zeros(psi.param_len());
    for p in &parts {
        g += p;
    }
    Ok(ParamVector(g / n as f64))
}

/// `E‖x₀‖² + E‖x₁‖² − 2·ot_loss(Ψ)`: equals the squared quadratic transport
/// distance when `Ψ` minimizes the dual loss, and underestimates it
/// otherwise.
pub fn w2_estimate(
    psi: &ConvexPotential,
    p0: &Distribution,
    p1: &Distribution,
    n: usize,
    seed: u64,
    cfg: &SolverSettings,
) -> Result<LossEstimate, LossError> {
    let ot = ot_loss(psi, p0, p1, n, seed, cfg)?;
    Ok(LossEstimate {
        value: p0.second_moment() + p1.second_moment() - 2.0 * ot.value,
        std_error: 2.0 * ot.std_error,
        n_samples: n,
        seed,
    })
}

/// The additive constant between the action-matching and dual losses:
/// `−½E_{p0}‖x₀‖² − ½E_{p1}‖x₁‖²` (analytic, no sampling).
pub fn am_constant(p0: &Distribution, p1: &Distribution) -> f64 {
    -0.5 * p0.second_moment() - 0.5 * p1.second_moment()
}
