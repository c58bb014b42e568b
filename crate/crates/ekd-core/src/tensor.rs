//! Dense row-major tensors over `f32` or `f64`.
//!
//! Training runs in single precision; gradient checking instantiates the same
//! code at double precision. Values are immutable after construction — the
//! autodiff tape accumulates gradients in its own buffers.

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{EkdError, Result};

/// Element dtype codes as stored in checkpoint files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type usable by the engine.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;
    /// Raw bit pattern widened to 64 bits; used for bit-exact comparisons.
    fn to_bits_u64(self) -> u64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from exactly `DTYPE.byte_width()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64c(v: f64) -> Self {
        v as f32
    }
    fn to_f64c(self) -> f64 {
        f64::from(self)
    }
    fn to_bits_u64(self) -> u64 {
        u64::from(self.to_bits())
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64c(v: f64) -> Self {
        v
    }
    fn to_f64c(self) -> f64 {
        self
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// An n-dimensional array of floating point values in row-major order.
///
/// Rank 0 (empty shape) denotes a scalar holding exactly one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(EkdError::shape(
                "tensor",
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(EkdError::shape(
                "tensor",
                format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on multi-element tensor");
        self.data[0]
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(EkdError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise bit-pattern equality (stricter than `==` for -0.0/NaN).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64c(v.to_f64c())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_numel() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0f32; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let t = Tensor::scalar(3.5f64);
        assert!(t.shape().is_empty());
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 3.5);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        assert!(strides_of(&[]).is_empty());
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::from_vec(vec![3], vec![1.0f32, -2.5, 0.125]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert!(t.bit_eq(&back));
    }
}
