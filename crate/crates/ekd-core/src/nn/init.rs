//! Parameter initialization: fan-in-scaled normal for conv/FC weights,
//! identity affine for batch norm.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

pub fn he_normal<E: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<E> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let numel: usize = shape.iter().product();
    let data: Vec<E> = (0..numel)
        .map(|_| E::from_f64c(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}
