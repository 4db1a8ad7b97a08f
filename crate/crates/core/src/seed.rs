//! Counter-based seed splitting.
//!
//! A master seed expands into independent substreams by mixing
//! `(seed, stream)` through the SplitMix64 finalizer. Each stage of the
//! pipeline owns a fixed stream index, so adding a stage never perturbs the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of substream `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(splitmix(seed) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Stream indices of the pipeline stages.
pub mod stream {
    pub const INIT_DENOISER: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const PROMPTS: u64 = 4;
    pub const SALIENCY: u64 = 5;
    pub const INIT_DISCRIMINATOR: u64 = 6;
    pub const DISC_PRETRAIN: u64 = 7;
    pub const ITERATIONS: u64 = 8;
    pub const VALIDATION: u64 = 9;
    pub const EVAL: u64 = 10;
    pub const THEORY: u64 = 11;
}
