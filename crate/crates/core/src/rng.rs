//! Keyed random substreams.
//!
//! Every stochastic quantity is drawn from a ChaCha stream whose seed is a
//! hash of a base seed and a tuple of indices, so results never depend on
//! evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[inline]
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with an ordered key into a new 64-bit seed.
pub fn derive_seed(base: u64, key: &[u64]) -> u64 {
    key.iter()
        .fold(splitmix(base), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn stream(base: u64, key: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(base, key))
}

// Key tags keep streams for different purposes disjoint.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_MARGINAL: u64 = 2;
pub(crate) const TAG_GIBBS: u64 = 3;
pub(crate) const TAG_FINAL: u64 = 4;
pub(crate) const TAG_CHAIN: u64 = 5;
pub(crate) const TAG_SCORE: u64 = 6;
pub(crate) const TAG_GRID: u64 = 7;
pub(crate) const TAG_CELL: u64 = 8;
