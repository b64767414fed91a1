//! Hand-differentiated layer kernels over dense tensors.
//!
//! Every forward returns its output together with a cache; the matching
//! backward consumes the cache and an upstream gradient. Accumulation is
//! `f32` with a fixed loop order, so identical inputs give bit-identical
//! outputs.

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod loss;
mod pool;

pub use activation::{relu_backward, relu_forward, ReluCache};
pub use batchnorm::{
    batchnorm_backward, batchnorm_eval_backward, batchnorm_forward, BnCache, BnGrads, BnState,
    BnStats,
};
pub use conv::{conv2d_backward, conv2d_forward, Conv2dCache, Conv2dGrads};
pub use linear::{linear_backward, linear_forward, LinearCache, LinearGrads};
pub use loss::softmax_cross_entropy;
pub use pool::{
    avg_downsample_backward, avg_downsample_forward, global_avg_pool_backward,
    global_avg_pool_forward, DownsampleCache, PoolCache,
};

/// Normalization regime for batch-norm layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
