use rand::Rng;

use super::Tensor;
use crate::scalar::Real;

/// Fan-in scaled uniform initialization for ReLU-family layers:
/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, scaled by `gain`.
pub fn he_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-bound..=bound)))
}
