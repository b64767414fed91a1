//! Dense row-major `f32` tensors of rank 1 to 4.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking rank, positive dimensions and data length.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::dim("tensor", "rank", "1..=4", shape.len()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", "shape", "positive dims", format!("{shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", "data", n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::dim(op, "rank", 4, self.shape.len())),
        }
    }

    /// Interprets the tensor as `[rows, cols]`.
    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(Error::dim(op, "rank", 2, self.shape.len())),
        }
    }

    /// Interprets the tensor as a vector of length `len`.
    pub fn expect_vec(&self, op: &'static str, axis: &'static str, len: usize) -> Result<()> {
        if self.shape.len() != 1 {
            return Err(Error::dim(op, axis, "rank 1", format!("rank {}", self.shape.len())));
        }
        if self.shape[0] != len {
            return Err(Error::dim(op, axis, len, self.shape[0]));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and every element (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return Err(Error::dim("reshape", "shape", self.data.len(), format!("{shape:?}")));
        }
        self.shape = shape;
        Ok(self)
    }
}
