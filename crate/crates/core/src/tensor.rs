//! Dense row-major f64 tensor.

use crate::error::{Error, Result};

/// Dense multi-dimensional value. All arithmetic in this crate is 64-bit;
/// serialized artifacts downcast to 32-bit at the container boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that the shape product matches the data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor.new",
                format!("shape {:?} implies {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
            requires_grad: false,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    /// Marks this tensor as a differentiation root when used as a tape leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar payload of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// Rounds every element through f32, the stored precision of all
    /// on-disk artifacts. Used to canonicalize values that must compare
    /// bit-equal across a save/load round trip.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Row-major offset of `idx` within `shape`.
pub fn offset(shape: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), idx.len());
    let mut off = 0;
    for (d, &i) in idx.iter().enumerate() {
        debug_assert!(i < shape[d]);
        off = off * shape[d] + i;
    }
    off
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn offset_is_row_major() {
        assert_eq!(offset(&[2, 3], &[0, 0]), 0);
        assert_eq!(offset(&[2, 3], &[0, 2]), 2);
        assert_eq!(offset(&[2, 3], &[1, 0]), 3);
        assert_eq!(offset(&[2, 3, 4], &[1, 2, 3]), 23);
    }

    #[test]
    fn quantize_roundtrips_through_f32() {
        let mut t = Tensor::new(vec![3], vec![0.1, 1.0 / 3.0, 2.5]).unwrap();
        t.quantize_f32();
        for &v in t.data() {
            assert_eq!(v, v as f32 as f64);
        }
    }
}
