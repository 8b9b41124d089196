//! Counter-based random streams.
//!
//! All randomness comes from ChaCha8, which is a counter-mode generator:
//! a `(seed, stream, word position)` triple addresses any output directly.
//! Per-site uniforms use stream 0 at word position `2 * site`; trajectory
//! `j` of a sampler uses stream `j + 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SITE_STREAM: u64 = 0;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for the `index`-th consumer of a master seed.
///
/// `derive_seed(m, i) = mix64(m ^ mix64(i + 1))`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ mix64(index.wrapping_add(1)))
}

/// Generator positioned at the start of a numbered stream.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for trajectory `j` (streams 1, 2, ...).
pub fn trajectory_stream(seed: u64, j: u64) -> ChaCha8Rng {
    stream(seed, j.wrapping_add(1))
}

/// Generator positioned at the uniform belonging to `site`.
pub fn site_stream(seed: u64, site: u64) -> ChaCha8Rng {
    let mut rng = stream(seed, SITE_STREAM);
    rng.set_word_pos(2 * site as u128);
    rng
}

/// Uniform in `[0, 1)` attached to a site; 53-bit resolution.
pub fn site_uniform(seed: u64, site: u64) -> f64 {
    use rand::RngCore;
    let mut rng = site_stream(seed, site);
    unit_from_bits(rng.next_u64())
}

#[inline]
pub(crate) fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
