//! Deterministic random streams.
//!
//! Every sampling operation in this crate takes an explicit 64-bit seed and
//! owns its generator, so nothing shares mutable RNG state. Independent
//! sub-draws inside one estimator (e.g. the two expectations of a dual loss)
//! derive their own seeds with [`derive`], which mixes a fixed operation tag
//! into the user seed. Identical `(inputs, seed)` therefore reproduce
//! bit-identical output on any platform and with any thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; a full-period bijection on `u64`.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives an independent sub-seed from a user seed and an operation tag.
///
/// Distinct tags give unrelated ChaCha key schedules, so estimators can share
/// one user seed across several internal draws without correlating them.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// A deterministic generator for the given seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Operation tags used when estimators split a user seed. Values are
/// arbitrary but fixed; changing them changes every downstream stream.
pub mod tags {
    pub const PAIR_SAMPLE: u64 = 0x01;
    pub const PAIR_GROUP: u64 = 0x02;
    pub const TIME_SHUFFLE: u64 = 0x03;
    pub const OT_SOURCE: u64 = 0x10;
    pub const OT_TARGET: u64 = 0x11;
    pub const AM_ENDPOINT0: u64 = 0x20;
    pub const AM_ENDPOINT1: u64 = 0x21;
    pub const AM_INTERIOR: u64 = 0x22;
    pub const SOLVE_EPOCH: u64 = 0x30;
    pub const SOLVE_LOSS: u64 = 0x31;
    pub const SOLVE_GRAD: u64 = 0x32;
    pub const SOLVE_VALIDATE: u64 = 0x33;
}
