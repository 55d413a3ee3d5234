//! Minimal CPU training engine: NCHW tensors, convolution via im2col and
//! dgemm, bilinear resampling, pooling, and Adam. Every differentiable op has
//! an explicit backward pass checked against finite differences.

mod layers;
mod param;
mod stack;
mod tensor;

pub use layers::{
    global_avg_pool, global_avg_pool_backward, max_pool2, max_pool2_backward, relu, relu_backward,
    resize_bilinear, resize_bilinear_backward, Conv2d, Linear,
};
pub use param::{Adam, Param};
pub use stack::{ConvSpec, ConvStack, StackTrace};
pub use tensor::Tensor;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
