//! Seed splitting for reproducible sampling.
//!
//! Every random draw is addressed by `(seed, stream, index, field)`. The
//! first three select a ChaCha8 key and the field selects the ChaCha stream,
//! so a value never depends on the order in which other values were drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Name and version of the generator backing every draw. Changing the
/// generator must bump this string because datasets record it.
pub const PRNG_NAME: &str = "chacha8/rand_chacha-0.9";

/// Build the generator for a given `(seed, stream, index)` and field.
pub fn rng_for(seed: u64, stream: u64, index: u64, field: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(field);
    rng
}

/// Uniform draw on the closed interval `[lo, hi]` (degenerate ranges allowed).
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Stream tags used across the crate.
pub mod streams {
    pub const LINREG: u64 = 1;
    pub const SHO: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
}
