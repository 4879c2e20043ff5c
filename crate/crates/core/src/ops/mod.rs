//! Differentiable primitives. Each forward function has a `_backward`
//! counterpart; parameter gradients are accumulated into the parameter
//! tensors and input gradients are returned.

pub mod conv;
pub mod elementwise;
pub mod matrix;
pub mod norm;
pub mod pool;
pub mod shape;
pub mod upsample;

pub use conv::{conv1d, conv1d_backward, conv2d, conv2d_backward, conv_out_size, ConvParams};
pub use elementwise::{
    add, global_avg_pool, global_avg_pool_backward, relu, relu_backward, scale_channels,
    scale_channels_backward, sigmoid,
};
pub use matrix::{linear, linear_backward, matmul, matmul_backward, softmax_rows, softmax_rows_backward};
pub use norm::{batch_norm, batch_norm_backward, BnCache, BnState};
pub use pool::{adaptive_pool, adaptive_pool_backward, max_pool2d, max_pool2d_backward, PoolMode};
pub use shape::{concat_channels, split_channels, transpose_samples};
pub use upsample::{bilinear_upsample, bilinear_upsample_backward};
