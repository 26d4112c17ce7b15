//! Seed derivation and parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type DetRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with stream coordinates (step, example id, channel, ...)
/// into an independent seed.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(root), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(root: u64, parts: &[u64]) -> DetRng {
    DetRng::seed_from_u64(derive_seed(root, parts))
}

/// Uniform in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data built together")
}

/// Weight matrix `[fan_in × fan_out]` with the ±1/√fan-in rule.
pub fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}
