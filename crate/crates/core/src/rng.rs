//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a
//! root seed plus a purpose tag and indices, so work can be split across
//! threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod tag {
    pub const ENV_MAPS: u64 = 1;
    pub const ENV_TRAIN: u64 = 2;
    pub const ENV_HELDOUT: u64 = 3;
    pub const ENV_PRETRAIN: u64 = 4;
    pub const TEMPLATE_TABLE: u64 = 5;
    pub const ROLLOUT: u64 = 10;
    pub const GEPA: u64 = 11;
    pub const EVAL: u64 = 12;
    pub const PRETRAIN_ORDER: u64 = 13;
    pub const BATCH_ORDER: u64 = 14;
    pub const PASS_EVAL: u64 = 15;
    pub const GEPA_SPLIT: u64 = 20;
    pub const GEPA_FRONT: u64 = 21;
    pub const GEPA_CANDIDATE: u64 = 22;
    pub const GEPA_DEV: u64 = 23;
    pub const GEPA_ASSIGN: u64 = 24;
    pub const GEPA_INIT: u64 = 25;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of indices into a new 64-bit seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Independent stream for `(seed, parts...)`.
pub fn stream(seed: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Draws a fresh seed from an existing stream, for handing to a sub-task.
pub fn fork(rng: &mut Rng) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}
