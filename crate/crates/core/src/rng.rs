//! Seeded randomness shared by every stage.
//!
//! All sampling goes through [`FactoryRng`] (ChaCha8) so that a run is a pure
//! function of its configured seed; candle's global RNG is never used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type FactoryRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

/// 64-bit FNV-1a. Stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Child seed for a named sub-stream, so stages never share RNG state.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut buf = base.to_le_bytes().to_vec();
    buf.extend_from_slice(label.as_bytes());
    stable_hash64(&buf)
}

pub fn rng_from_seed(seed: u64) -> FactoryRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut FactoryRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal(rng: &mut FactoryRng) -> f64 {
    StandardNormal.sample(rng)
}
