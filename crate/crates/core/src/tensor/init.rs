//! Seeded parameter initialization.

use rand::Rng;

use super::Tensor;

/// Uniform in `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape and length agree")
}

/// Dense weight `[fan_in, fan_out]`.
pub fn linear_weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out)
}

/// Convolution kernel `[out, in, k, k]`.
pub fn conv_weight<R: Rng + ?Sized>(rng: &mut R, out: usize, inp: usize, k: usize) -> Tensor {
    xavier_uniform(rng, &[out, inp, k, k], inp * k * k, out * k * k)
}
