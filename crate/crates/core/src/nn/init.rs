use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Fan-in and fan-out of a weight shape: `(out, in)` for dense layers,
/// `(out, in, kh, kw)` for convolutions.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [out, inp, rest @ ..] => {
            let receptive: usize = rest.iter().product();
            (inp * receptive, out * receptive)
        }
        [] => (0, 0),
    }
}

/// Uniform Glorot initialization on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if shape.is_empty() || numel == 0 {
        return Err(Error::shape("xavier_init", "non-empty shape", shape));
    }
    let (fan_in, fan_out) = fans(shape);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..numel).map(|_| T::of(dist.sample(&mut rng))).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Stable per-parameter seed derived from a model seed and a dotted name.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    name.bytes().fold(mix(seed), |h, b| mix(h ^ u64::from(b)))
}

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
