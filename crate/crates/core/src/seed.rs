//! Seed derivation. Every random stream in a run is keyed by a tuple of
//! integers, so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed` one word at a time.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

/// Named random streams; the tag keeps e.g. init and dropout apart.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Dropout = 4,
    Split = 5,
    Synth = 6,
}

pub fn rng(seed: u64, stream: Stream, parts: &[u64]) -> ChaCha8Rng {
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(stream as u64);
    all.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(mix(seed, &all))
}

/// Per-sample augmentation seed.
pub fn sample_seed(seed: u64, epoch: u64, sample_index: u64) -> u64 {
    mix(seed, &[Stream::Augment as u64, epoch, sample_index])
}
