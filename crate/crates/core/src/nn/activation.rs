use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ReluCache {
    shape: Vec<usize>,
    mask: Vec<bool>,
}

pub fn relu_forward(input: &Tensor) -> (Tensor, ReluCache) {
    let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
    let data = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let out = Tensor::new(input.shape().to_vec(), data).expect("same shape");
    (
        out,
        ReluCache {
            shape: input.shape().to_vec(),
            mask,
        },
    )
}

impl ReluCache {
    /// Which inputs were strictly positive.
    pub fn active_mask(&self) -> &[bool] {
        &self.mask
    }
}

/// Gradient is zero where the input was `<= 0`, including exactly zero.
pub fn relu_backward(cache: &ReluCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::dim(
            "relu_backward",
            "grad_out",
            format!("{:?}", cache.shape),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&cache.mask)
        .map(|(&g, &m)| if m { g } else { 0.0 })
        .collect();
    Tensor::new(cache.shape.clone(), data)
}
