//! Forward and reverse-mode primitives for every layer a RecNet uses.

mod batchnorm;
mod conv;
mod pointwise;

pub use batchnorm::{
    batchnorm_backward, batchnorm_backward_range, batchnorm_forward, batchnorm_forward_range, BnGrads, BnMode, BnState,
    DEFAULT_EPS, DEFAULT_MOMENTUM,
};
pub use conv::{
    conv2d_accumulate, conv2d_backward, conv2d_backward_into, conv2d_forward, conv2d_output_dims, ConvGrads, Padding,
};
pub use pointwise::{
    argmax_rows, avgpool_global, avgpool_global_backward, linear_backward, linear_forward, maxpool2, maxpool2_backward,
    relu, relu_backward, softmax_cross_entropy, PoolIndices,
};
