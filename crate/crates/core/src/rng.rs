//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a user seed plus a stream label and an index, so that items can
//! be produced in any order (or in parallel) without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use alloc::vec::Vec;

/// splitmix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A generator for stream `label`, item `index`, under `seed`.
pub fn stream(seed: u64, label: u64, index: u64) -> ChaCha8Rng {
    let s = mix(mix(seed ^ mix(label)) ^ index);
    ChaCha8Rng::seed_from_u64(s)
}

pub fn standard_normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

// Stream labels.
pub const LABEL_TOY_WEIGHTS: u64 = 0x5745_4947;
pub const LABEL_SAMPLER_NOISE: u64 = 0x4E4F_4953;
pub const LABEL_BACKGROUND: u64 = 0x424B_4744;
pub const LABEL_PASTE: u64 = 0x5041_5354;
pub const LABEL_PAIRING: u64 = 0x5041_4952;
pub const LABEL_TRAIN_STEP: u64 = 0x5452_4E53;
pub const LABEL_HELD_OUT: u64 = 0x484F_4C44;
