//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream addressed by (seed, stream index), so results do not depend on how
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::ParamVector;

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a tag.
pub fn mix(seed: u64, tag: u64) -> u64 {
    splitmix(splitmix(seed) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Independent generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// theta + G with G ~ N(0, sigma^2 I), drawn from the given generator.
pub fn perturb(theta: &ParamVector, sigma: f64, rng: &mut ChaCha8Rng) -> ParamVector {
    let sigma = sigma as f32;
    let values = theta
        .as_slice()
        .iter()
        .map(|&w| {
            let z: f32 = StandardNormal.sample(rng);
            w + sigma * z
        })
        .collect();
    ParamVector::from_vec_unchecked(values)
}
