//! Small shared building blocks for the encoder and decoder.

use rand::Rng;

use crate::rng::uniform_vec;
use crate::tensor::{Real, Tensor, TensorError};

/// ε inside every layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Trainable matrix drawn uniformly from `[−1/√fan_in, +1/√fan_in]`.
pub fn uniform_param<F: Real>(
    rng: &mut impl Rng,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::param(shape, uniform_vec(rng, n, -bound, bound)).expect("non-empty shape")
}

pub fn zeros_param<F: Real>(shape: Vec<usize>) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::param(shape, vec![F::zero(); n]).expect("non-empty shape")
}

pub fn ones_param<F: Real>(shape: Vec<usize>) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::param(shape, vec![F::one(); n]).expect("non-empty shape")
}

/// `x·W + b`, with the `[1×K]` bias tiled across rows.
pub fn linear<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>, TensorError> {
    let rows = x.shape()[0];
    x.matmul(w)?.add(&b.repeat_rows(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn uniform_param_respects_fan_in_bound() {
        let mut rng = seeded_rng(11);
        let w: Tensor<f64> = uniform_param(&mut rng, vec![16, 8], 16);
        let bound = 1.0 / 4.0;
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.is_param());
    }

    #[test]
    fn linear_matches_direct_computation() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1, 3], vec![0.5, -0.5, 0.0]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.to_vec(), vec![1.5, 1.5, 4.0, 3.5, 3.5, 10.0]);
    }
}
