//! Closed-form ground truth, independent of every iterative code path.
//!
//! - [`bures_map`]: the exact linear transport map and squared distance
//!   between Gaussians (classical closed form via symmetric matrix roots).
//! - [`quantile_map_1d`]: the 1D transport map `F₁⁻¹ ∘ F₀` through analytic
//!   CDFs and bisection.
//! - [`grid_conjugate`]: brute-force grid search for conjugate values.
//! - [`brute_force_assignment`]: exhaustive minimum over permutations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::distributions::{Distribution, Gaussian};
use crate::potentials::{ConvexPotential, Quadratic, DEFAULT_RIDGE};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("matrix eigenvalue {0} is at or below the SPD floor of 1e-12")]
    SpdViolation(f64),
    #[error("quantile map supports 1D Gaussian and Uniform distributions")]
    UnsupportedDistribution,
    #[error("grid conjugate supports dimensions 1 and 2, got {0}")]
    DimensionTooLarge(usize),
    #[error("grid box needs lower < upper and at least 2 points per dim")]
    BadGrid,
    #[error("cannot embed the transport map in the quadratic family: {0}")]
    Potential(#[from] crate::potentials::PotentialError),
}

/// The exact quadratic-cost transport solution between two Gaussians.
#[derive(Debug, Clone)]
pub struct GaussianOTSolution {
    /// Symmetric positive-definite `A` with `T(x) = shift + A·x`.
    pub linear_map: DMatrix<f64>,
    pub shift: DVector<f64>,
    pub w2_squared: f64,
    /// The quadratic potential whose gradient is `T`.
    pub brenier: ConvexPotential,
}

/// Symmetric square root and its inverse via eigendecomposition; guarantees
/// symmetric SPD outputs.
fn sym_sqrt(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), OracleError> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut min_ev = f64::INFINITY;
    for &ev in eig.eigenvalues.iter() {
        min_ev = min_ev.min(ev);
    }
    if min_ev <= 1e-12 {
        return Err(OracleError::SpdViolation(min_ev));
    }
    let d = m.nrows();
    let sqrt_d = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            eig.eigenvalues[i].sqrt()
        } else {
            0.0
        }
    });
    let inv_sqrt_d = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0 / eig.eigenvalues[i].sqrt()
        } else {
            0.0
        }
    });
    let v = &eig.eigenvectors;
    Ok((v * sqrt_d * v.transpose(), v * inv_sqrt_d * v.transpose()))
}

/// The closed-form transport map between Gaussians:
/// `A = Σ₀^{-1/2} (Σ₀^{1/2} Σ₁ Σ₀^{1/2})^{1/2} Σ₀^{-1/2}`,
/// `W₂² = ‖μ₀−μ₁‖² + tr(Σ₀ + Σ₁ − 2(Σ₀^{1/2} Σ₁ Σ₀^{1/2})^{1/2})`.
pub fn bures_map(g0: &Gaussian, g1: &Gaussian) -> Result<GaussianOTSolution, OracleError> {
    let (s0_sqrt, s0_inv_sqrt) = sym_sqrt(g0.covariance())?;
    let middle = &s0_sqrt * g1.covariance() * &s0_sqrt;
    let (middle_sqrt, _) = sym_sqrt(&middle)?;
    let a = &s0_inv_sqrt * &middle_sqrt * &s0_inv_sqrt;
    let a = (&a + a.transpose()) * 0.5;

    let shift = g1.mean() - &a * g0.mean();
    let w2_squared = (g0.mean() - g1.mean()).norm_squared()
        + (g0.covariance() + g1.covariance() - middle_sqrt * 2.0).trace();

    // Embed A in the quadratic family: ridge small enough that A − ridge·I
    // stays positive definite.
    let eig_min = nalgebra::SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if eig_min <= 1e-12 {
        return Err(OracleError::SpdViolation(eig_min));
    }
    let ridge = DEFAULT_RIDGE.min(eig_min / 2.0);
    let brenier =
        ConvexPotential::Quadratic(Quadratic::from_matrix(&a, shift.clone(), 0.0, ridge)?);

    Ok(GaussianOTSolution {
        linear_map: a,
        shift,
        w2_squared,
        brenier,
    })
}

fn gaussian_cdf(mean: f64, sd: f64, x: f64) -> f64 {
    0.5 * (1.0 + libm::erf((x - mean) / (sd * std::f64::consts::SQRT_2)))
}

enum Cdf1d {
    Gaussian { mean: f64, sd: f64 },
    Uniform { lower: f64, upper: f64 },
}

impl Cdf1d {
    fn from_distribution(d: &Distribution) -> Result<Self, OracleError> {
        if d.dim() != 1 {
            return Err(OracleError::UnsupportedDistribution);
        }
        match d {
            Distribution::Gaussian(g) => Ok(Self::Gaussian {
                mean: g.mean()[0],
                sd: g.covariance()[(0, 0)].sqrt(),
            }),
            Distribution::Uniform { lower, upper } => Ok(Self::Uniform {
                lower: lower[0],
                upper: upper[0],
            }),
            _ => Err(OracleError::UnsupportedDistribution),
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        match self {
            Self::Gaussian { mean, sd } => gaussian_cdf(*mean, *sd, x),
            Self::Uniform { lower, upper } => ((x - lower) / (upper - lower)).clamp(0.0, 1.0),
        }
    }

    /// Clamps to the support and reports whether clamping happened.
    fn clamp_to_support(&self, x: f64) -> (f64, bool) {
        match self {
            Self::Gaussian { .. } => (x, false),
            Self::Uniform { lower, upper } => {
                if x < *lower {
                    (*lower, true)
                } else if x > *upper {
                    (*upper, true)
                } else {
                    (x, false)
                }
            }
        }
    }

    fn bracket(&self, p: f64) -> (f64, f64) {
        match self {
            Self::Gaussian { mean, sd } => {
                let mut half = 8.0 * sd.max(1e-12);
                while self.cdf(mean - half) > p || self.cdf(mean + half) < p {
                    half *= 2.0;
                }
                (mean - half, mean + half)
            }
            Self::Uniform { lower, upper } => (*lower, *upper),
        }
    }

    /// `F⁻¹(p)` by bisection to an interval of width 1e-12.
    fn inv_cdf(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = self.bracket(p);
        for _ in 0..200 {
            if hi - lo <= 1e-12 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// The classical 1D transport map `T = F₁⁻¹ ∘ F₀` evaluated at `x`.
/// Supports Gaussian and Uniform marginals; a point outside a Uniform
/// source's support is clamped with a warning.
pub fn quantile_map_1d(d0: &Distribution, d1: &Distribution, x: f64) -> Result<f64, OracleError> {
    let f0 = Cdf1d::from_distribution(d0)?;
    let f1 = Cdf1d::from_distribution(d1)?;
    let (x, clamped) = f0.clamp_to_support(x);
    if clamped {
        log::warn!("quantile_map_1d: input clamped to the source support at {x}");
    }
    Ok(f1.inv_cdf(f0.cdf(x)))
}

/// Result of a brute-force grid conjugate search.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConjugate {
    pub value: f64,
    pub argmax: DVector<f64>,
    /// Set when the maximizing grid point lies on the box boundary, i.e. the
    /// box likely truncates the true maximizer.
    pub boundary_hit: bool,
}

/// Maximizes `⟨y,z⟩ − f(z)` over a regular grid on the box. Dimensions 1
/// and 2 only.
pub fn grid_conjugate(
    f: &ConvexPotential,
    y: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    points_per_dim: usize,
) -> Result<GridConjugate, OracleError> {
    let d = y.len();
    if d > 2 {
        return Err(OracleError::DimensionTooLarge(d));
    }
    if points_per_dim < 2
        || lower.len() != d
        || upper.len() != d
        || lower.iter().zip(upper.iter()).any(|(l, u)| l >= u)
    {
        return Err(OracleError::BadGrid);
    }
    let m = points_per_dim;
    let coord =
        |dim: usize, i: usize| lower[dim] + (upper[dim] - lower[dim]) * i as f64 / (m - 1) as f64;

    let mut best = f64::NEG_INFINITY;
    let mut best_idx = vec![0usize; d];
    let mut z = DVector::zeros(d);
    if d == 1 {
        for i in 0..m {
            z[0] = coord(0, i);
            let v = y.dot(&z) - f.eval(&z);
            if v > best {
                best = v;
                best_idx[0] = i;
            }
        }
    } else {
        for i in 0..m {
            z[0] = coord(0, i);
            for j in 0..m {
                z[1] = coord(1, j);
                let v = y.dot(&z) - f.eval(&z);
                if v > best {
                    best = v;
                    best_idx = vec![i, j];
                }
            }
        }
    }
    let argmax = DVector::from_fn(d, |k, _| coord(k, best_idx[k]));
    let boundary_hit = best_idx.iter().any(|&i| i == 0 || i == m - 1);
    if boundary_hit {
        log::warn!("grid_conjugate: argmax on the box boundary; enlarge the box");
    }
    Ok(GridConjugate {
        value: best,
        argmax,
        boundary_hit,
    })
}

/// Operator (spectral) norm of a symmetric matrix: the largest absolute
/// eigenvalue.
pub fn sym_operator_norm(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    nalgebra::SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &ev| acc.max(ev.abs()))
}

/// Exhaustive minimum-cost assignment (for cross-checking the fast solver).
/// Panics above 8x8.
pub fn brute_force_assignment(cost: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    assert!(n <= 8, "brute force capped at 8x8");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_perm = perm.clone();
    let mut best_cost = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = (0..n).map(|i| cost[(i, p[i])]).sum();
        if c < best_cost {
            best_cost = c;
            best_perm = p.to_vec();
        }
    });
    (best_perm, best_cost)
}

fn permute(perm: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn equal_covariance_translation() {
        let g0 = Gaussian::standard(2);
        let g1 = Gaussian::isotropic(dvector![1.0, -1.0], 1.0).unwrap();
        let sol = bures_map(&g0, &g1).unwrap();
        assert_relative_eq!(sol.linear_map, DMatrix::identity(2, 2), epsilon = 1e-10);
        assert_relative_eq!(sol.shift, dvector![1.0, -1.0], epsilon = 1e-10);
        assert_relative_eq!(sol.w2_squared, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn one_d_scaling() {
        let g0 = Gaussian::standard(1);
        let g1 = Gaussian::isotropic(dvector![0.0], 4.0).unwrap();
        let sol = bures_map(&g0, &g1).unwrap();
        assert_relative_eq!(sol.linear_map[(0, 0)], 2.0, epsilon = 1e-10);
        // (2 - 1)^2
        assert_relative_eq!(sol.w2_squared, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn identical_gaussians_give_identity() {
        let g = Gaussian::new(dvector![0.3, -0.7], dmatrix![1.5, 0.4; 0.4, 0.9]).unwrap();
        let sol = bures_map(&g, &g).unwrap();
        assert_relative_eq!(sol.linear_map, DMatrix::identity(2, 2), epsilon = 1e-9);
        assert_relative_eq!(sol.shift.norm(), 0.0, epsilon = 1e-9);
        assert!(sol.w2_squared.abs() <= 1e-9);
    }

    #[test]
    fn diagonal_covariances_scale_per_axis() {
        let g0 = Gaussian::new(dvector![0.0, 0.0], dmatrix![4.0, 0.0; 0.0, 1.0]).unwrap();
        let g1 = Gaussian::new(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, 9.0]).unwrap();
        let sol = bures_map(&g0, &g1).unwrap();
        assert_relative_eq!(sol.linear_map[(0, 0)], 0.5, epsilon = 1e-10);
        assert_relative_eq!(sol.linear_map[(1, 1)], 3.0, epsilon = 1e-10);
        assert_relative_eq!(sol.linear_map[(0, 1)], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn map_pushes_samples_onto_the_target() {
        let g0 = Gaussian::new(dvector![1.0, 0.0], dmatrix![2.0, 0.5; 0.5, 1.0]).unwrap();
        let g1 = Gaussian::new(dvector![-1.0, 2.0], dmatrix![1.0, -0.2; -0.2, 0.5]).unwrap();
        let sol = bures_map(&g0, &g1).unwrap();
        // Pushforward moment identity: A Σ0 Aᵀ = Σ1.
        let pushed_cov = &sol.linear_map * g0.covariance() * sol.linear_map.transpose();
        assert_relative_eq!(pushed_cov, *g1.covariance(), epsilon = 1e-8);

        let n = 100_000;
        let xs = Distribution::Gaussian(g0.clone()).sample(n, 23);
        let mut mean = dvector![0.0, 0.0];
        let mut pushed = Vec::with_capacity(n);
        for i in 0..n {
            let t = &sol.shift + &sol.linear_map * xs.row(i).transpose();
            mean += &t;
            pushed.push(t);
        }
        mean /= n as f64;
        for j in 0..2 {
            let se = (g1.covariance()[(j, j)] / n as f64).sqrt();
            assert!((mean[j] - g1.mean()[j]).abs() <= 4.0 * se);
        }
        let mut cov = DMatrix::zeros(2, 2);
        for t in &pushed {
            let c = t - &mean;
            cov += &c * c.transpose();
        }
        cov /= n as f64 - 1.0;
        for j in 0..2 {
            // Var of a variance estimate is about 2σ⁴/n.
            let se = (2.0 * g1.covariance()[(j, j)].powi(2) / n as f64).sqrt();
            assert!((cov[(j, j)] - g1.covariance()[(j, j)]).abs() <= 4.0 * se);
        }
    }

    #[test]
    fn brenier_gradient_is_the_map() {
        let g0 = Gaussian::new(dvector![1.0, 0.0], dmatrix![2.0, 0.5; 0.5, 1.0]).unwrap();
        let g1 = Gaussian::new(dvector![-1.0, 2.0], dmatrix![1.0, -0.2; -0.2, 0.5]).unwrap();
        let sol = bures_map(&g0, &g1).unwrap();
        for x in [dvector![0.0, 0.0], dvector![1.5, -2.0]] {
            let t = &sol.shift + &sol.linear_map * &x;
            assert_relative_eq!(sol.brenier.grad(&x), t, epsilon = 1e-9);
        }
    }

    #[test]
    fn quantile_map_examples() {
        let n01 = Distribution::standard_gaussian(1);
        let n04 = Distribution::gaussian(dvector![0.0], dmatrix![4.0]).unwrap();
        assert_relative_eq!(
            quantile_map_1d(&n01, &n04, 1.3).unwrap(),
            2.6,
            epsilon = 1e-9
        );

        let u01 = Distribution::uniform(dvector![0.0], dvector![1.0]).unwrap();
        let u02 = Distribution::uniform(dvector![0.0], dvector![2.0]).unwrap();
        assert_relative_eq!(
            quantile_map_1d(&u01, &u02, 0.25).unwrap(),
            0.5,
            epsilon = 1e-10
        );

        for x in [-2.0, -0.3, 0.0, 1.7] {
            assert_relative_eq!(quantile_map_1d(&n01, &n01, x).unwrap(), x, epsilon = 1e-10);
        }

        let mix =
            Distribution::gaussian_mixture(dvector![1.0], vec![Gaussian::standard(1)]).unwrap();
        assert!(quantile_map_1d(&mix, &n01, 0.0).is_err());
    }

    #[test]
    fn quantile_and_bures_agree_for_1d_gaussians() {
        let g0 = Gaussian::isotropic(dvector![0.5], 2.0).unwrap();
        let g1 = Gaussian::isotropic(dvector![-1.0], 0.5).unwrap();
        let sol = bures_map(&g0, &g1).unwrap();
        let d0 = Distribution::Gaussian(g0);
        let d1 = Distribution::Gaussian(g1);
        let mut x = -3.0;
        while x <= 3.0 {
            let q = quantile_map_1d(&d0, &d1, x).unwrap();
            let b = sol.shift[0] + sol.linear_map[(0, 0)] * x;
            assert!((q - b).abs() <= 1e-8, "x {x}: quantile {q} vs linear {b}");
            x += 0.25;
        }
    }

    #[test]
    fn grid_conjugate_examples() {
        let half_sq = ConvexPotential::half_sq_norm(1);
        let g = grid_conjugate(
            &half_sq,
            &dvector![3.0],
            &dvector![-10.0],
            &dvector![10.0],
            1_000_001,
        )
        .unwrap();
        assert!((g.value - 4.5).abs() <= 1e-4);
        assert!(!g.boundary_hit);

        let sq = ConvexPotential::isotropic_quadratic(1, 2.0, dvector![0.0]).unwrap();
        let g = grid_conjugate(
            &sq,
            &dvector![4.0],
            &dvector![-10.0],
            &dvector![10.0],
            1_000_001,
        )
        .unwrap();
        assert!((g.value - 4.0).abs() <= 1e-4);

        // Argmax for y = 30 is z* = 15, outside the box.
        let g = grid_conjugate(
            &sq,
            &dvector![30.0],
            &dvector![-10.0],
            &dvector![10.0],
            10_001,
        )
        .unwrap();
        assert!(g.boundary_hit);

        let err = grid_conjugate(
            &ConvexPotential::half_sq_norm(3),
            &dvector![0.0, 0.0, 0.0],
            &dvector![-1.0, -1.0, -1.0],
            &dvector![1.0, 1.0, 1.0],
            11,
        );
        assert!(err.is_err());
    }

    #[test]
    fn grid_conjugate_matches_quadratic_closed_form_2d() {
        let p = ConvexPotential::quadratic(
            dmatrix![1.0, 0.0; 0.4, 0.8],
            dvector![0.3, -0.2],
            0.1,
            1e-6,
        )
        .unwrap();
        let y = dvector![1.0, -0.5];
        let exact = crate::conjugate::conjugate(&p, &y, &Default::default()).unwrap();
        let g = grid_conjugate(&p, &y, &dvector![-6.0, -6.0], &dvector![6.0, 6.0], 2001).unwrap();
        // Grid misses the max by at most curvature * (h/2)^2 per axis.
        let h = 12.0 / 2000.0;
        let curvature = 3.0;
        let tol = 2.0 * curvature * (h / 2.0) * (h / 2.0) + 1e-12;
        assert!(!g.boundary_hit);
        assert!(
            (g.value - exact.value).abs() <= tol,
            "grid {} vs exact {}",
            g.value,
            exact.value
        );
    }
}
