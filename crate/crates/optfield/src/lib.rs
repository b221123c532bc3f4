//! Optimal vector fields defined by convex potentials, the transport losses
//! built on them, and closed-form oracles for checking both.
//!
//! A convex potential `Ψ` induces a velocity field that carries a point `z₀`
//! in a straight line to `∇Ψ(z₀)` over `t ∈ [0, 1]`. This crate provides:
//!
//! - sampleable distributions with analytic moments ([`distributions`]);
//! - two parametrized convex potential families ([`potentials`]);
//! - convex conjugates and recovery of the trajectory start from an
//!   interior point ([`conjugate`]);
//! - the induced field, its scalar potential, and ODE pushforward
//!   ([`optimal_fields`]);
//! - transport plans and interpolating paths ([`couplings`]);
//! - Monte Carlo estimators of the flow-matching, optimal-flow-matching,
//!   dual-transport, and action-matching losses ([`losses`]);
//! - closed-form ground truth: Gaussian transport maps, 1D quantile maps,
//!   grid-search conjugates ([`oracles`]);
//! - a stochastic first-order minimizer over potential parameters
//!   ([`solver`]).
//!
//! All estimators take explicit seeds and reproduce bit-identically for any
//! worker count; see [`rng`].

pub mod conjugate;
pub mod couplings;
pub mod distributions;
pub mod losses;
pub mod optimal_fields;
pub mod oracles;
pub mod potentials;
pub mod rng;
pub mod solver;

pub use conjugate::{conjugate, recover_z0, ConjugateResult, SolverSettings, TimeScaledPotential};
pub use couplings::{PathShape, PathSpec, PlanSpec};
pub use distributions::Distribution;
pub use losses::LossEstimate;
pub use optimal_fields::{field_velocity, pushforward, s_eval, OdeMethod};
pub use potentials::{ConvexPotential, ParamVector};
pub use solver::{LossKind, SolveConfig, SolveTrace};
