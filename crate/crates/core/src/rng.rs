//! Seed derivation. Every stochastic event (a task draw, one rollout, a
//! replacement index) gets its own generator keyed by a path of integers,
//! so results do not depend on evaluation order or worker scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each element of `path` into a new 64-bit seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream labels used as the first path element of derived seeds.
pub mod stream {
    pub const TASK: u64 = 1;
    pub const ON_POLICY: u64 = 2;
    pub const IEF_DEMOS: u64 = 3;
    pub const IEF_ROLLOUT: u64 = 4;
    pub const REPLACE: u64 = 5;
    pub const WARM_START: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const INIT: u64 = 8;
    pub const BANK: u64 = 9;
}
