//! Randomness sources.
//!
//! When `TRUSTPLANE_SEED` is set every component draws from a ChaCha20
//! stream derived from the seed and a per-component label, so runs are
//! reproducible. Otherwise each stream is seeded from the OS.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::Digest;

pub const SEED_ENV: &str = "TRUSTPLANE_SEED";

pub type Rng = ChaCha20Rng;

/// Stream for `label` derived from `seed`.
pub fn seeded(seed: &str, label: &str) -> Rng {
    let key = Digest::of_parts(&[seed.as_bytes(), b"\0", label.as_bytes()]);
    ChaCha20Rng::from_seed(key.0)
}

pub fn from_entropy() -> Rng {
    ChaCha20Rng::from_entropy()
}

/// Stream for `label`, seeded from `TRUSTPLANE_SEED` when present.
pub fn for_component(label: &str) -> Rng {
    match std::env::var(SEED_ENV) {
        Ok(seed) if !seed.is_empty() => seeded(&seed, label),
        _ => from_entropy(),
    }
}

pub fn random_bytes<const N: usize>(rng: &mut impl RngCore) -> [u8; N] {
    let mut out = [0u8; N];
    rng.fill_bytes(&mut out);
    out
}
