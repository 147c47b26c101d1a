//! Weight initialization.
//!
//! He-uniform for conv and dense weights, zero biases. Draws happen in
//! `f64` and are cast once, so `f32` and `f64` instantiations of the same
//! seed start from identical values (up to rounding).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;

/// `n` samples from U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn he_uniform<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<S> {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn bounds_and_determinism() {
        let fan_in = 50;
        let bound = (6.0 / 50.0f64).sqrt();
        let a: Vec<f64> = he_uniform(&mut rng::stream(1, &[rng::tag::INIT]), fan_in, 1000);
        let b: Vec<f64> = he_uniform(&mut rng::stream(1, &[rng::tag::INIT]), fan_in, 1000);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() < bound));
        // Not degenerate: spread should cover a decent part of the range.
        let max = a.iter().cloned().fold(f64::MIN, f64::max);
        let min = a.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max > bound * 0.8 && min < -bound * 0.8);
    }
}
