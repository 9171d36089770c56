//! Dense CPU tensors, the kernels a semi-dense matcher needs, and a small
//! reverse-mode autodiff tape over them.
//!
//! Free functions (`conv2d`, `softmax`, ...) are the inference path and save
//! nothing for backpropagation. [`Graph`] records the same kernels together
//! with what their gradients need.

mod attention;
pub mod counters;
mod conv;
mod error;
mod float;
pub mod gradcheck;
mod graph;
mod linalg;
mod pool;
mod resample;
mod softmax;
mod tensor;

pub use attention::{elu_plus_one, linear_attention, vanilla_attention, LinearAttentionForm};
pub use conv::{conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, out_dim};
pub use counters::Kernel;
pub use error::{Result, TensorError};
pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use linalg::{matmul, matmul_backward};
pub use pool::{maxpool2d, maxpool2d_backward};
pub use resample::{bilinear_upsample, bilinear_upsample_backward};
pub use softmax::{softmax, softmax_backward};
pub use tensor::Tensor;
