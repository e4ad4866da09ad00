//! Deterministic sub-stream derivation. Every random draw in the workspace
//! comes from a ChaCha8 stream keyed by a stable mix of (master seed, domain
//! tag, indices), so results never depend on evaluation order and any step of
//! a run can be reproduced in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Stream for `(seed, tag)`.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(tag.as_bytes())))
}

/// Stream for `(seed, tag, index)`.
pub fn stream_at(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ fnv1a(tag.as_bytes()) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)),
    ))
}

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::RngExt;
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform draw in `[-bound, bound)`.
pub fn uniform_sym(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    use rand::RngExt;
    (rng.random::<f64>() * 2.0 - 1.0) * bound
}
