//! Seeded random streams. One master seed fans out to named substreams so
//! toggling one stochastic feature does not perturb the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SneRng = ChaCha8Rng;

/// Derive a deterministic substream from a master seed and a stream name.
pub fn substream(master_seed: u64, name: &str) -> SneRng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(master_seed ^ h)
}
