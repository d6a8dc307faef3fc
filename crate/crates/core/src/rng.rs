//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`rng_from`], so a run is fully
//! determined by its configured seed. The generator is ChaCha8 (`rand_chacha`)
//! and is recorded in every resolved config as [`PRNG_NAME`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PRNG_NAME: &str = "chacha8";

pub type DetRng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for a named stream (FNV-1a of the name,
/// mixed with splitmix64).
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// `len` values drawn i.i.d. from U[-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn uniform_fan_in(rng: &mut DetRng, len: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len)
        .map(|_| rng.random_range(-bound..=bound) as f32)
        .collect()
}
