//! Counter-based seeding: every Monte-Carlo draw gets its own generator
//! derived from `(seed, counter)`, so results never depend on how draws
//! are split across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream` under base seed `seed`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, stream: u64) -> Rng {
    rng(derive(seed, stream))
}

// Stream tags keep independent consumers of one user seed apart.
pub(crate) const STREAM_SIGMA: u64 = 0x5151;
pub(crate) const STREAM_CALIBRATE: u64 = 0xCA11;
pub(crate) const STREAM_REFERENCE: u64 = 0x2EF0;
pub(crate) const STREAM_SUBSAMPLE: u64 = 0x5AB5;
pub(crate) const STREAM_HEURISTIC: u64 = 0x4E75;
pub(crate) const STREAM_POCOCK: u64 = 0x9C0C;
pub(crate) const STREAM_SEARCH: u64 = 0x5EA2;
pub(crate) const STREAM_COMPLETE: u64 = 0xC0F1;
pub(crate) const STREAM_GENERATE: u64 = 0x6E2A;
pub(crate) const STREAM_NOISE: u64 = 0x2015;
