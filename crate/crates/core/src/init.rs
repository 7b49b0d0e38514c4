//! Seeded parameter initialization.
//!
//! Every array is drawn from its own ChaCha stream keyed by
//! (seed, parameter name), so adding or removing parameters never
//! shifts the values of the others.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::hashing;

fn rng_for(seed: u64, name: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(hashing::mix(seed) ^ hashing::hash_str(name))
}

/// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub fn uniform_fan_in(seed: u64, name: &str, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = rng_for(seed, name);
    (0..len).map(|_| dist.sample(&mut rng)).collect()
}
