//! Seeded random streams. Every random draw in the workbench comes from a generator
//! derived here from a root seed plus a path of stream identifiers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Scalar, Tensor};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, path...)`. Distinct paths give independent streams.
pub fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Stream identifiers used across modules.
pub mod streams {
    pub const HOST_INIT: u64 = 1;
    pub const HOST_SUBSET: u64 = 2;
    pub const HOST_SHUFFLE: u64 = 3;
    pub const TARGET_INIT: u64 = 4;
    pub const TARGET_SHUFFLE: u64 = 5;
    pub const TRANSLATOR_INIT: u64 = 10;
    pub const EPOCH_SHUFFLE: u64 = 11;
    pub const AUGMENT: u64 = 12;
    pub const DROPOUT: u64 = 13;
    pub const BASELINE: u64 = 20;
    pub const STUDY: u64 = 30;
}

/// `U(-sqrt(6/fan_in), +sqrt(6/fan_in))` initialized tensor.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}
