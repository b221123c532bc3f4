//! Transport plans (pair samplers) and interpolating paths between their
//! endpoints.
//!
//! A plan couples draws from two marginals; a path adds an interpolation
//! rule for the intermediate points. The downstream loss identities hold for
//! any choice here, which is exactly what the plan/path variants exist to
//! exercise.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::distributions::Distribution;
use crate::potentials::ConvexPotential;
use crate::rng;

/// Cost guard for the exact `O(b³)` assignment solve.
pub const MAX_ASSIGNMENT_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("marginals have different dimensions: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("minibatch size {0} exceeds the assignment guard of {MAX_ASSIGNMENT_BATCH}")]
    BatchTooLarge(usize),
    #[error("minibatch size must satisfy 1 <= batch <= n, got batch {batch}, n {n}")]
    BadBatch { batch: usize, n: usize },
    #[error("curved-sine direction must be a finite unit vector")]
    BadDirection,
}

/// A sampler of coupled pairs `(x₀, x₁)` whose first marginal is `p0` and
/// whose second marginal is `p1` (for `MapPlan`, the pushforward of `p0`
/// under `∇Ψ_map`).
#[derive(Debug, Clone)]
pub enum PlanSpec {
    /// The product coupling: independent draws from each marginal.
    Independent { p0: Distribution, p1: Distribution },
    /// Draws groups of `batch` points from each marginal and pairs each
    /// group by the permutation minimizing the total squared distance
    /// (exact assignment solve).
    MinibatchOt {
        p0: Distribution,
        p1: Distribution,
        batch: usize,
    },
    /// Deterministic coupling along a gradient map: `x₁ = ∇Ψ_map(x₀)`.
    MapPlan {
        p0: Distribution,
        map: ConvexPotential,
    },
}

impl PlanSpec {
    pub fn independent(p0: Distribution, p1: Distribution) -> Result<Self, PlanError> {
        if p0.dim() != p1.dim() {
            return Err(PlanError::DimMismatch(p0.dim(), p1.dim()));
        }
        Ok(Self::Independent { p0, p1 })
    }

    pub fn minibatch_ot(
        p0: Distribution,
        p1: Distribution,
        batch: usize,
    ) -> Result<Self, PlanError> {
        if p0.dim() != p1.dim() {
            return Err(PlanError::DimMismatch(p0.dim(), p1.dim()));
        }
        if batch > MAX_ASSIGNMENT_BATCH {
            return Err(PlanError::BatchTooLarge(batch));
        }
        if batch == 0 {
            return Err(PlanError::BadBatch { batch, n: 0 });
        }
        Ok(Self::MinibatchOt { p0, p1, batch })
    }

    pub fn map_plan(p0: Distribution, map: ConvexPotential) -> Result<Self, PlanError> {
        if p0.dim() != map.dim() {
            return Err(PlanError::DimMismatch(p0.dim(), map.dim()));
        }
        Ok(Self::MapPlan { p0, map })
    }

    pub fn p0(&self) -> &Distribution {
        match self {
            Self::Independent { p0, .. }
            | Self::MinibatchOt { p0, .. }
            | Self::MapPlan { p0, .. } => p0,
        }
    }

    pub fn dim(&self) -> usize {
        self.p0().dim()
    }

    /// Draws `n` coupled pairs; pure in `(self, n, seed)`.
    pub fn sample_pairs(
        &self,
        n: usize,
        seed: u64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), PlanError> {
        assert!(n >= 1, "sample_pairs needs n >= 1");
        match self {
            Self::Independent { p0, p1 } => {
                let x0 = p0.sample(n, rng::derive(seed, rng::tags::PAIR_SAMPLE));
                let x1 = p1.sample(n, rng::derive(seed, rng::tags::PAIR_SAMPLE ^ 0xffff));
                Ok((x0, x1))
            }
            Self::MinibatchOt { p0, p1, batch } => {
                if *batch > n {
                    return Err(PlanError::BadBatch { batch: *batch, n });
                }
                let d = p0.dim();
                let mut x0 = DMatrix::zeros(n, d);
                let mut x1 = DMatrix::zeros(n, d);
                let mut written = 0;
                let mut group = 0u64;
                while written < n {
                    let b = (*batch).min(n - written);
                    let gseed = rng::derive(seed, rng::tags::PAIR_GROUP.wrapping_add(group << 8));
                    let g0 = p0.sample(b, rng::derive(gseed, 0));
                    let g1 = p1.sample(b, rng::derive(gseed, 1));
                    let cost =
                        DMatrix::from_fn(b, b, |i, j| (g0.row(i) - g1.row(j)).norm_squared());
                    let assign = min_cost_assignment(&cost);
                    for (i, &j) in assign.iter().enumerate() {
                        x0.set_row(written + i, &g0.row(i));
                        x1.set_row(written + i, &g1.row(j));
                    }
                    written += b;
                    group += 1;
                }
                Ok((x0, x1))
            }
            Self::MapPlan { p0, map } => {
                let x0 = p0.sample(n, rng::derive(seed, rng::tags::PAIR_SAMPLE));
                let mut x1 = DMatrix::zeros(n, p0.dim());
                for i in 0..n {
                    let g = map.grad(&x0.row(i).transpose());
                    x1.set_row(i, &g.transpose());
                }
                Ok((x0, x1))
            }
        }
    }
}

/// Interpolation rule between coupled endpoints.
#[derive(Debug, Clone)]
pub enum PathShape {
    /// `(1−t)x₀ + t·x₁`.
    Linear,
    /// `(1−t)x₀ + t·x₁ + a·sin(πt)·c·‖x₁−x₀‖` for a fixed unit direction
    /// `c`: an endpoint-preserving bend that visibly moves the interior
    /// marginals off the straight line.
    CurvedSine {
        amplitude: f64,
        direction: DVector<f64>,
    },
}

impl PathShape {
    pub fn curved_sine(amplitude: f64, direction: DVector<f64>) -> Result<Self, PlanError> {
        if direction.iter().any(|v| !v.is_finite())
            || !amplitude.is_finite()
            || (direction.norm() - 1.0).abs() > 1e-8
        {
            return Err(PlanError::BadDirection);
        }
        Ok(Self::CurvedSine {
            amplitude,
            direction,
        })
    }
}

/// A plan plus an interpolation shape: a sampler of the whole sequence of
/// intermediate distributions.
#[derive(Debug, Clone)]
pub struct PathSpec {
    pub plan: PlanSpec,
    pub shape: PathShape,
}

impl PathSpec {
    pub fn linear(plan: PlanSpec) -> Self {
        Self {
            plan,
            shape: PathShape::Linear,
        }
    }

    pub fn new(plan: PlanSpec, shape: PathShape) -> Result<Self, PlanError> {
        if let PathShape::CurvedSine { direction, .. } = &shape {
            if direction.len() != plan.dim() {
                return Err(PlanError::DimMismatch(direction.len(), plan.dim()));
            }
        }
        Ok(Self { plan, shape })
    }

    /// The interpolated point at time `t`; pins `x₀` at `t = 0` and `x₁` at
    /// `t = 1` for every shape.
    pub fn interpolate(&self, x0: &DVector<f64>, x1: &DVector<f64>, t: f64) -> DVector<f64> {
        assert!((0.0..=1.0).contains(&t), "time must lie in [0,1], got {t}");
        let base = x0 * (1.0 - t) + x1 * t;
        match &self.shape {
            PathShape::Linear => base,
            PathShape::CurvedSine {
                amplitude,
                direction,
            } => {
                let bend = amplitude * (std::f64::consts::PI * t).sin() * (x1 - x0).norm();
                base + direction * bend
            }
        }
    }
}

/// Exact minimum-cost assignment on a square cost matrix by shortest
/// augmenting paths with dual potentials, `O(n³)`. Returns the column
/// assigned to each row.
pub(crate) fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // 1-based arrays with column 0 as the virtual start.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assign[row_of[j] - 1] = j - 1;
        }
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::brute_force_assignment;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn std_pair(d: usize) -> (Distribution, Distribution) {
        (
            Distribution::standard_gaussian(d),
            Distribution::standard_gaussian(d),
        )
    }

    #[test]
    fn independent_pairs_are_uncorrelated() {
        let (p0, p1) = std_pair(1);
        let plan = PlanSpec::independent(p0, p1).unwrap();
        let n = 100_000;
        let (x0, x1) = plan.sample_pairs(n, 3).unwrap();
        let m0 = x0.column(0).mean();
        let m1 = x1.column(0).mean();
        let corr: f64 = (0..n)
            .map(|i| (x0[(i, 0)] - m0) * (x1[(i, 0)] - m1))
            .sum::<f64>()
            / (n as f64 - 1.0);
        assert!(corr.abs() <= 3.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn minibatch_pairing_matches_hand_count() {
        // Points {0, 1} vs {10, 0}: pairing 0↔0, 1↔10 costs 81 against 101.
        let cost = nalgebra::dmatrix![100.0, 0.0; 81.0, 1.0];
        let assign = min_cost_assignment(&cost);
        assert_eq!(assign, vec![1, 0]);
    }

    #[test]
    fn map_plan_with_identity_is_diagonal() {
        let p0 = Distribution::standard_gaussian(2);
        let plan = PlanSpec::map_plan(p0, ConvexPotential::half_sq_norm(2)).unwrap();
        let (x0, x1) = plan.sample_pairs(64, 9).unwrap();
        assert_relative_eq!(x0, x1, epsilon = 1e-14);
    }

    #[test]
    fn batch_guard_rejects_large_batches() {
        let (p0, p1) = std_pair(1);
        assert!(matches!(
            PlanSpec::minibatch_ot(p0.clone(), p1.clone(), 65),
            Err(PlanError::BatchTooLarge(65))
        ));
        let plan = PlanSpec::minibatch_ot(p0, p1, 32).unwrap();
        assert!(plan.sample_pairs(16, 0).is_err());
    }

    #[test]
    fn marginals_match_moments() {
        let p0 =
            Distribution::gaussian(dvector![1.0, 0.0], nalgebra::DMatrix::identity(2, 2) * 2.0)
                .unwrap();
        let p1 = Distribution::standard_gaussian(2);
        let n = 50_000;
        for plan in [
            PlanSpec::independent(p0.clone(), p1.clone()).unwrap(),
            PlanSpec::minibatch_ot(p0.clone(), p1.clone(), 32).unwrap(),
        ] {
            let (x0, x1) = plan.sample_pairs(n, 17).unwrap();
            for (xs, dist) in [(&x0, &p0), (&x1, &p1)] {
                let mean = dist.mean();
                let sq: Vec<f64> = xs.row_iter().map(|r| r.norm_squared()).collect();
                let sample_m2 = sq.iter().sum::<f64>() / n as f64;
                let se_m2 = {
                    let var =
                        sq.iter().map(|v| (v - sample_m2).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                    (var / n as f64).sqrt()
                };
                assert!((sample_m2 - dist.second_moment()).abs() <= 4.0 * se_m2);
                for j in 0..2 {
                    let col_mean = xs.column(j).mean();
                    let se = (2.0f64 / n as f64).sqrt();
                    assert!((col_mean - mean[j]).abs() <= 4.0 * se);
                }
            }
        }
    }

    #[test]
    fn interpolation_examples() {
        let (p0, p1) = std_pair(2);
        let linear = PathSpec::linear(PlanSpec::independent(p0.clone(), p1.clone()).unwrap());
        let x0 = dvector![0.0, 0.0];
        let x1 = dvector![2.0, 2.0];
        assert_eq!(linear.interpolate(&x0, &x1, 0.25), dvector![0.5, 0.5]);

        let curved = PathSpec::new(
            PlanSpec::independent(p0, p1).unwrap(),
            PathShape::curved_sine(0.5, dvector![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let mid = curved.interpolate(&dvector![0.0, 0.0], &dvector![2.0, 0.0], 0.5);
        assert_relative_eq!(mid, dvector![1.0, 1.0], epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn assignment_matches_brute_force(
            b in 1usize..=6,
            costs in prop::collection::vec(0.0f64..10.0, 36),
        ) {
            let cost = DMatrix::from_fn(b, b, |i, j| costs[i * 6 + j]);
            let fast = min_cost_assignment(&cost);
            let (brute, brute_cost) = brute_force_assignment(&cost);
            let fast_cost: f64 = (0..b).map(|i| cost[(i, fast[i])]).sum();
            prop_assert!((fast_cost - brute_cost).abs() <= 1e-9 * (1.0 + brute_cost.abs()),
                "fast {fast_cost} vs brute {brute_cost} ({fast:?} vs {brute:?})");
        }

        #[test]
        fn interpolation_pins_endpoints(
            xs in prop::collection::vec(-5.0f64..5.0, 4),
            amplitude in -2.0f64..2.0,
        ) {
            let (p0, p1) = std_pair(2);
            let x0 = dvector![xs[0], xs[1]];
            let x1 = dvector![xs[2], xs[3]];
            let linear = PathSpec::linear(PlanSpec::independent(p0.clone(), p1.clone()).unwrap());
            prop_assert_eq!(linear.interpolate(&x0, &x1, 0.0), x0.clone());
            prop_assert_eq!(linear.interpolate(&x0, &x1, 1.0), x1.clone());

            let curved = PathSpec::new(
                PlanSpec::independent(p0, p1).unwrap(),
                PathShape::curved_sine(amplitude, dvector![1.0, 0.0]).unwrap(),
            ).unwrap();
            prop_assert!((curved.interpolate(&x0, &x1, 0.0) - &x0).norm() <= 1e-12);
            prop_assert!((curved.interpolate(&x0, &x1, 1.0) - &x1).norm() <= 1e-12);
        }

        #[test]
        fn pair_sampling_is_deterministic(seed in any::<u64>()) {
            let (p0, p1) = std_pair(2);
            let plan = PlanSpec::minibatch_ot(p0, p1, 8).unwrap();
            let (a0, a1) = plan.sample_pairs(20, seed).unwrap();
            let (b0, b1) = plan.sample_pairs(20, seed).unwrap();
            prop_assert_eq!(a0.as_slice(), b0.as_slice());
            prop_assert_eq!(a1.as_slice(), b1.as_slice());
        }
    }
}
