//! Seeded random instances for the verification commands.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use optfield::potentials::ConvexPotential;

/// Well-conditioned random quadratic: diagonal factor in [0.5, 1.5],
/// off-diagonals in [-0.5, 0.5].
pub fn random_quadratic(r: &mut ChaCha8Rng, d: usize) -> ConvexPotential {
    let factor = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            r.gen_range(0.5..1.5)
        } else if i > j {
            r.gen_range(-0.5..0.5)
        } else {
            0.0
        }
    });
    let shift = DVector::from_fn(d, |_, _| r.gen_range(-1.0..1.0));
    ConvexPotential::quadratic(factor, shift, r.gen_range(-1.0..1.0), 1e-6).unwrap()
}

pub fn random_max_affine(r: &mut ChaCha8Rng, d: usize) -> ConvexPotential {
    let k = r.gen_range(2..=6);
    let slopes = DMatrix::from_fn(k, d, |_, _| r.gen_range(-1.0..1.0));
    let intercepts = DVector::from_fn(k, |_, _| r.gen_range(-0.5..0.5));
    ConvexPotential::max_affine(0.1, slopes, intercepts).unwrap()
}

pub fn random_point(r: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * r.sample::<f64, _>(StandardNormal))
}

/// Identity potential with uniform parameter noise, the standard solve
/// initialization.
pub fn noisy_identity(d: usize, noise: f64, seed: u64) -> ConvexPotential {
    let mut r = optfield::rng::stream(seed);
    let factor = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0 + r.gen_range(-noise..noise)
        } else if i > j {
            r.gen_range(-noise..noise)
        } else {
            0.0
        }
    });
    let shift = DVector::from_fn(d, |_, _| r.gen_range(-noise..noise));
    ConvexPotential::quadratic(factor, shift, 0.0, 1e-6).unwrap()
}
