//! Reproducible random substreams.
//!
//! Every stochastic step draws from a ChaCha stream whose seed is a mix of
//! the run seed and a small key tuple, so results do not depend on the order
//! in which patients, batches or draws are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash, used to key substreams by string ids.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn mix(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn substream(seed: u64, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(mix(seed, keys))
}

/// Stream-domain tags, so different consumers of the same seed never share
/// a stream.
pub mod domain {
    pub const COHORT: u64 = 0x11;
    pub const RISK_CODES: u64 = 0x12;
    pub const INIT: u64 = 0x21;
    pub const SHUFFLE: u64 = 0x22;
    pub const WEIGHTS: u64 = 0x23;
    pub const DROPOUT: u64 = 0x24;
    pub const MASKING: u64 = 0x25;
    pub const PREDICT_WEIGHTS: u64 = 0x31;
    pub const PREDICT_LATENT: u64 = 0x32;
    pub const GRADCHECK: u64 = 0x41;
}
