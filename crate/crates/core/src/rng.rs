//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit [`StreamRng`]. Work that is
//! split across threads draws from sub-streams keyed by a stable index, so
//! results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a key.
pub fn derive_seed(seed: u64, key: u64) -> u64 {
    mix64(seed ^ mix64(key.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Derives a child seed from a path of keys.
pub fn derive_seed_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &k| derive_seed(s, k))
}

pub fn stream(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

/// Independent sub-stream `index` of the stream rooted at `seed`.
pub fn substream(seed: u64, index: u64) -> StreamRng {
    let mut rng = StreamRng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Hashes a slice of floats bit-exactly into a seed.
pub fn hash_f64s(seed: u64, values: &[f64]) -> u64 {
    values
        .iter()
        .fold(mix64(seed), |h, v| derive_seed(h, v.to_bits()))
}
