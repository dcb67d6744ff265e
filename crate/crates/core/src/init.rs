//! Deterministic scaled-Gaussian weight initialization.
//!
//! Samples are rounded through f32 so that a freshly initialized model
//! round-trips bit-identically through the float32 weight file.

use crate::tensor::Tensor;
use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;

fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    // (0, 1]: guards the log in Box-Muller
    (rng.next_u64() as f64 + 1.0) / (u64::MAX as f64 + 1.0)
}

/// One standard normal draw via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = uniform01(rng);
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Tensor with entries drawn from N(0, sigma^2), rounded through f32.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>, sigma: f64) -> Tensor {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (standard_normal(rng) * sigma) as f32 as f64)
        .collect();
    Tensor::new(shape, data)
}

/// Xavier-style scale for a fan_in x fan_out projection.
pub fn xavier_sigma(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Kaiming-style scale from fan_in alone.
pub fn kaiming_sigma(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
