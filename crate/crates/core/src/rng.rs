//! Seeded RNG substreams.
//!
//! All randomness in an experiment flows from a single root seed. Independent
//! consumers (weight init, window shuffling, Fourier banks, synthetic data)
//! pull from named substreams so that changing one consumer never perturbs
//! another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a hash, used to map substream names to ChaCha stream ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A deterministic RNG for the given root seed and substream name.
///
/// Two calls with the same `(seed, name)` pair produce identical streams on
/// every platform; distinct names select distinct ChaCha streams.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}
