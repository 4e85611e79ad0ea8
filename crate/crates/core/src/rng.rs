//! Labelled, reproducible random streams.
//!
//! Every stochastic operation takes a [`Seed`] and opens its own stream
//! through [`seeded_rng`]; the label keeps streams of different consumers
//! apart so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::canvas::Seed;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Opens the stream identified by `(seed, label)`.
pub fn seeded_rng(seed: Seed, label: &str) -> StreamRng {
    let mut state = seed.0 ^ fnv1a(label.as_bytes()).rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed, e.g. one per sample or per training step.
pub fn derive_seed(seed: Seed, label: &str, index: u64) -> Seed {
    let mut state = seed.0 ^ fnv1a(label.as_bytes()) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93);
    splitmix64(&mut state);
    Seed(splitmix64(&mut state))
}

pub fn standard_normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_standard_normal(rng: &mut StreamRng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
