//! Parametrized convex potential families.
//!
//! Two families are provided, both strongly convex by construction so that
//! every conjugate problem downstream has a unique attained maximizer:
//!
//! - [`Quadratic`]: `Ψ(x) = ½xᵀAx + bᵀx + c` with `A = LLᵀ + εI` built from
//!   a lower-triangular factor `L` and a fixed ridge `ε > 0`. Positive
//!   definiteness is structural, so optimizers can move `L` freely.
//! - [`RegularizedMaxAffine`]: `Ψ(x) = (α/2)‖x‖² + max_k(aₖ·x + cₖ)` with a
//!   fixed regularization strength `α > 0`.
//!
//! The flattened parameter vector `θ` (see [`ParamVector`]) covers `L`, `b`,
//! `c` for the quadratic family and the slopes and intercepts for the
//! max-affine family; `ε` and `α` are hyperparameters, not optimized.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default ridge `ε` for the quadratic family.
pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Default regularization strength `α` for the max-affine family.
pub const DEFAULT_STRENGTH: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("factor must be square lower-triangular, shift length must match")]
    BadShape,
    #[error("ridge must be > 0, got {0}")]
    BadRidge(f64),
    #[error("strength must be > 0, got {0}")]
    BadStrength(f64),
    #[error("max-affine needs K >= 1 rows and matching intercepts")]
    BadRows,
    #[error("non-finite parameter value")]
    NonFinite,
    #[error("matrix minus ridge*I is not positive definite")]
    NotPositiveDefinite,
    #[error("parameter vector has length {got}, expected {expected}")]
    BadParamLen { got: usize, expected: usize },
}

/// Flat parameter vector `θ` of a potential.
///
/// Layout per variant:
/// - `Quadratic`: the lower triangle of `L` row-major (`(0,0), (1,0), (1,1),
///   …`), then `b`, then `c`.
/// - `RegularizedMaxAffine`: slopes row-major, then intercepts.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub DVector<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.dot(&other.0)
    }
}

/// `Ψ(x) = ½xᵀAx + bᵀx + c`, `A = LLᵀ + εI`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    factor: DMatrix<f64>,
    shift: DVector<f64>,
    offset: f64,
    ridge: f64,
    matrix: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl PartialEq for Quadratic {
    fn eq(&self, other: &Self) -> bool {
        self.factor == other.factor
            && self.shift == other.shift
            && self.offset == other.offset
            && self.ridge == other.ridge
    }
}

impl Quadratic {
    /// Builds from a lower-triangular factor. Entries strictly above the
    /// diagonal must be zero.
    pub fn new(
        factor: DMatrix<f64>,
        shift: DVector<f64>,
        offset: f64,
        ridge: f64,
    ) -> Result<Self, PotentialError> {
        let d = shift.len();
        if factor.shape() != (d, d) {
            return Err(PotentialError::BadShape);
        }
        if factor.iter().any(|v| !v.is_finite())
            || shift.iter().any(|v| !v.is_finite())
            || !offset.is_finite()
            || !ridge.is_finite()
        {
            return Err(PotentialError::NonFinite);
        }
        if ridge <= 0.0 {
            return Err(PotentialError::BadRidge(ridge));
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if factor[(i, j)] != 0.0 {
                    return Err(PotentialError::BadShape);
                }
            }
        }
        let matrix = &factor * factor.transpose() + DMatrix::identity(d, d) * ridge;
        let chol = nalgebra::Cholesky::new(matrix.clone())
            .expect("LL^T + ridge*I is positive definite by construction");
        Ok(Self {
            factor,
            shift,
            offset,
            ridge,
            matrix,
            chol,
        })
    }

    /// Builds the quadratic whose matrix equals the given SPD `a` exactly,
    /// by factoring `a - ridge*I`.
    pub fn from_matrix(
        a: &DMatrix<f64>,
        shift: DVector<f64>,
        offset: f64,
        ridge: f64,
    ) -> Result<Self, PotentialError> {
        let d = shift.len();
        if a.shape() != (d, d) {
            return Err(PotentialError::BadShape);
        }
        if !ridge.is_finite() || ridge <= 0.0 {
            return Err(PotentialError::BadRidge(ridge));
        }
        let reduced = a - DMatrix::identity(d, d) * ridge;
        let chol = nalgebra::Cholesky::new(reduced).ok_or(PotentialError::NotPositiveDefinite)?;
        Self::new(chol.l(), shift, offset, ridge)
    }

    /// `Ψ(x) = (a/2)‖x‖² + shift·x`. Exact (`A` carries no factoring error)
    /// for `a = 1` and other values where `√(a-1)` or `√(a/2)` is exact.
    pub fn isotropic(dim: usize, a: f64, shift: DVector<f64>) -> Result<Self, PotentialError> {
        if !a.is_finite() || a <= 0.0 {
            return Err(PotentialError::BadRidge(a));
        }
        let (ridge, l) = if a >= 1.0 {
            (1.0, (a - 1.0).sqrt())
        } else {
            (a / 2.0, (a / 2.0).sqrt())
        };
        Self::new(DMatrix::identity(dim, dim) * l, shift, 0.0, ridge)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Solves `A z = rhs` with the cached Cholesky factor.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

/// `Ψ(x) = (α/2)‖x‖² + max_k(slopes_k·x + intercepts_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizedMaxAffine {
    strength: f64,
    slopes: DMatrix<f64>,
    intercepts: DVector<f64>,
}

impl RegularizedMaxAffine {
    pub fn new(
        strength: f64,
        slopes: DMatrix<f64>,
        intercepts: DVector<f64>,
    ) -> Result<Self, PotentialError> {
        if !strength.is_finite() || strength <= 0.0 {
            return Err(PotentialError::BadStrength(strength));
        }
        if slopes.nrows() == 0 || slopes.nrows() != intercepts.len() || slopes.ncols() == 0 {
            return Err(PotentialError::BadRows);
        }
        if slopes.iter().any(|v| !v.is_finite())
            || intercepts.iter().any(|v| !v.is_finite())
            || !strength.is_finite()
        {
            return Err(PotentialError::NonFinite);
        }
        Ok(Self {
            strength,
            slopes,
            intercepts,
        })
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn slopes(&self) -> &DMatrix<f64> {
        &self.slopes
    }

    pub fn intercepts(&self) -> &DVector<f64> {
        &self.intercepts
    }

    pub fn rows(&self) -> usize {
        self.slopes.nrows()
    }

    /// Index of the maximizing affine piece at `x`; ties break to the lowest
    /// index so the selected subgradient is deterministic.
    pub fn active_row(&self, x: &DVector<f64>) -> usize {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for k in 0..self.rows() {
            let v = self.slopes.row(k).transpose().dot(x) + self.intercepts[k];
            if v > best_val {
                best_val = v;
                best = k;
            }
        }
        best
    }

    /// All rows within `tol·(1+|max|)` of the maximum at `x` (the
    /// subdifferential support).
    pub fn active_set(&self, x: &DVector<f64>, tol: f64) -> Vec<usize> {
        let vals: Vec<f64> = (0..self.rows())
            .map(|k| self.slopes.row(k).transpose().dot(x) + self.intercepts[k])
            .collect();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let cut = max - tol * (1.0 + max.abs());
        (0..self.rows()).filter(|&k| vals[k] >= cut).collect()
    }
}

/// A member of one of the two convex families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PotentialJson", into = "PotentialJson")]
pub enum ConvexPotential {
    Quadratic(Quadratic),
    RegularizedMaxAffine(RegularizedMaxAffine),
}

impl ConvexPotential {
    pub fn quadratic(
        factor: DMatrix<f64>,
        shift: DVector<f64>,
        offset: f64,
        ridge: f64,
    ) -> Result<Self, PotentialError> {
        Ok(Self::Quadratic(Quadratic::new(
            factor, shift, offset, ridge,
        )?))
    }

    pub fn max_affine(
        strength: f64,
        slopes: DMatrix<f64>,
        intercepts: DVector<f64>,
    ) -> Result<Self, PotentialError> {
        Ok(Self::RegularizedMaxAffine(RegularizedMaxAffine::new(
            strength, slopes, intercepts,
        )?))
    }

    /// `Ψ = ½‖·‖²`, the potential of the identity map. `A = I` exactly.
    pub fn half_sq_norm(dim: usize) -> Self {
        Self::Quadratic(
            Quadratic::new(DMatrix::zeros(dim, dim), DVector::zeros(dim), 0.0, 1.0).unwrap(),
        )
    }

    /// `Ψ(x) = (a/2)‖x‖² + shift·x`.
    pub fn isotropic_quadratic(
        dim: usize,
        a: f64,
        shift: DVector<f64>,
    ) -> Result<Self, PotentialError> {
        Ok(Self::Quadratic(Quadratic::isotropic(dim, a, shift)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic(q) => q.shift.len(),
            Self::RegularizedMaxAffine(m) => m.slopes.ncols(),
        }
    }

    /// Strong-convexity modulus guaranteed by construction (`ε` for the
    /// quadratic family, `α` for max-affine).
    pub fn strong_convexity(&self) -> f64 {
        match self {
            Self::Quadratic(q) => q.ridge,
            Self::RegularizedMaxAffine(m) => m.strength,
        }
    }

    /// `Ψ(x)`.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            Self::Quadratic(q) => 0.5 * (&q.matrix * x).dot(x) + q.shift.dot(x) + q.offset,
            Self::RegularizedMaxAffine(m) => {
                let k = m.active_row(x);
                0.5 * m.strength * x.norm_squared()
                    + m.slopes.row(k).transpose().dot(x)
                    + m.intercepts[k]
            }
        }
    }

    /// `∇Ψ(x)`; for max-affine the subgradient of the lowest-index active
    /// row.
    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Quadratic(q) => &q.matrix * x + &q.shift,
            Self::RegularizedMaxAffine(m) => {
                let k = m.active_row(x);
                x * m.strength + m.slopes.row(k).transpose()
            }
        }
    }

    pub fn param_len(&self) -> usize {
        match self {
            Self::Quadratic(q) => {
                let d = q.shift.len();
                d * (d + 1) / 2 + d + 1
            }
            Self::RegularizedMaxAffine(m) => m.rows() * (m.slopes.ncols() + 1),
        }
    }

    /// Flattens the optimizable parameters into `θ` (see [`ParamVector`]).
    pub fn params(&self) -> ParamVector {
        let mut theta = DVector::zeros(self.param_len());
        match self {
            Self::Quadratic(q) => {
                let d = q.shift.len();
                let mut idx = 0;
                for i in 0..d {
                    for j in 0..=i {
                        theta[idx] = q.factor[(i, j)];
                        idx += 1;
                    }
                }
                for i in 0..d {
                    theta[idx] = q.shift[i];
                    idx += 1;
                }
                theta[idx] = q.offset;
            }
            Self::RegularizedMaxAffine(m) => {
                let (k, d) = m.slopes.shape();
                let mut idx = 0;
                for r in 0..k {
                    for c in 0..d {
                        theta[idx] = m.slopes[(r, c)];
                        idx += 1;
                    }
                }
                for r in 0..k {
                    theta[idx] = m.intercepts[r];
                    idx += 1;
                }
            }
        }
        ParamVector(theta)
    }

    /// Rebuilds a potential of the same variant and hyperparameters from a
    /// flat `θ`. Inverse of [`Self::params`].
    pub fn with_params(&self, theta: &ParamVector) -> Result<Self, PotentialError> {
        let expected = self.param_len();
        if theta.len() != expected {
            return Err(PotentialError::BadParamLen {
                got: theta.len(),
                expected,
            });
        }
        let t = &theta.0;
        match self {
            Self::Quadratic(q) => {
                let d = q.shift.len();
                let mut factor = DMatrix::zeros(d, d);
                let mut idx = 0;
                for i in 0..d {
                    for j in 0..=i {
                        factor[(i, j)] = t[idx];
                        idx += 1;
                    }
                }
                let shift = DVector::from_fn(d, |i, _| t[idx + i]);
                let offset = t[idx + d];
                Ok(Self::Quadratic(Quadratic::new(
                    factor, shift, offset, q.ridge,
                )?))
            }
            Self::RegularizedMaxAffine(m) => {
                let (k, d) = m.slopes.shape();
                let slopes = DMatrix::from_fn(k, d, |r, c| t[r * d + c]);
                let intercepts = DVector::from_fn(k, |r, _| t[k * d + r]);
                Ok(Self::RegularizedMaxAffine(RegularizedMaxAffine::new(
                    m.strength, slopes, intercepts,
                )?))
            }
        }
    }

    /// `∂Ψ(x)/∂θ` at fixed `x`, in the layout of [`ParamVector`]. For
    /// max-affine only the active row receives nonzero slope/intercept
    /// entries.
    pub fn param_grad(&self, x: &DVector<f64>) -> ParamVector {
        let mut g = DVector::zeros(self.param_len());
        match self {
            Self::Quadratic(q) => {
                let d = q.shift.len();
                // d(½xᵀ(LLᵀ+εI)x)/dL_ij = x_i (Lᵀx)_j
                let ltx = q.factor.transpose() * x;
                let mut idx = 0;
                for i in 0..d {
                    for j in 0..=i {
                        g[idx] = x[i] * ltx[j];
                        idx += 1;
                    }
                }
                for i in 0..d {
                    g[idx] = x[i];
                    idx += 1;
                }
                g[idx] = 1.0;
            }
            Self::RegularizedMaxAffine(m) => {
                let (k_rows, d) = m.slopes.shape();
                let k = m.active_row(x);
                for c in 0..d {
                    g[k * d + c] = x[c];
                }
                g[k_rows * d + k] = 1.0;
            }
        }
        ParamVector(g)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
enum PotentialJson {
    Quadratic {
        dim: usize,
        factor: Vec<Vec<f64>>,
        shift: Vec<f64>,
        offset: f64,
        ridge: f64,
    },
    RegularizedMaxAffine {
        dim: usize,
        strength: f64,
        slopes: Vec<Vec<f64>>,
        intercepts: Vec<f64>,
    },
}

impl TryFrom<PotentialJson> for ConvexPotential {
    type Error = PotentialError;

    fn try_from(json: PotentialJson) -> Result<Self, Self::Error> {
        match json {
            PotentialJson::Quadratic {
                dim,
                factor,
                shift,
                offset,
                ridge,
            } => {
                if factor.len() != dim
                    || factor.iter().any(|r| r.len() != dim)
                    || shift.len() != dim
                {
                    return Err(PotentialError::BadShape);
                }
                let factor = DMatrix::from_fn(dim, dim, |i, j| factor[i][j]);
                ConvexPotential::quadratic(factor, DVector::from_vec(shift), offset, ridge)
            }
            PotentialJson::RegularizedMaxAffine {
                dim,
                strength,
                slopes,
                intercepts,
            } => {
                if slopes.is_empty() || slopes.iter().any(|r| r.len() != dim) {
                    return Err(PotentialError::BadRows);
                }
                let k = slopes.len();
                let slopes = DMatrix::from_fn(k, dim, |i, j| slopes[i][j]);
                ConvexPotential::max_affine(strength, slopes, DVector::from_vec(intercepts))
            }
        }
    }
}

impl From<ConvexPotential> for PotentialJson {
    fn from(p: ConvexPotential) -> Self {
        match p {
            ConvexPotential::Quadratic(q) => {
                let d = q.shift.len();
                PotentialJson::Quadratic {
                    dim: d,
                    factor: (0..d)
                        .map(|i| (0..d).map(|j| q.factor[(i, j)]).collect())
                        .collect(),
                    shift: q.shift.iter().copied().collect(),
                    offset: q.offset,
                    ridge: q.ridge,
                }
            }
            ConvexPotential::RegularizedMaxAffine(m) => {
                let (k, d) = m.slopes.shape();
                PotentialJson::RegularizedMaxAffine {
                    dim: d,
                    strength: m.strength,
                    slopes: (0..k)
                        .map(|i| (0..d).map(|j| m.slopes[(i, j)]).collect())
                        .collect(),
                    intercepts: m.intercepts.iter().copied().collect(),
                }
            }
        }
    }
}
