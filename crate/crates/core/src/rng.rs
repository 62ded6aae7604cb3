//! Seeded stream derivation.
//!
//! Every stochastic component (environment noise, mask draws, action
//! sampling, initialization, minibatch shuffling) owns its own ChaCha stream
//! derived from the run seed, a role tag and an index. Streams are therefore
//! independent of batch layout and scheduling, which is what makes fixed
//! (seed, layout) runs bitwise reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a deterministic substream for (seed, role, index).
pub fn stream(seed: u64, role: &str, index: u64) -> ChaCha8Rng {
    let mut acc = splitmix64(seed);
    for b in role.bytes() {
        acc = splitmix64(acc ^ u64::from(b));
    }
    acc = splitmix64(acc ^ index);
    ChaCha8Rng::seed_from_u64(acc)
}
