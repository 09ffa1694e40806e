//! Minimal dense-tensor neural-network core.
//!
//! NCHW `f64` tensors, dense/depthwise convolution, ReLU6, folded batch-norm
//! affine, MobileNetV2 inverted residual blocks, exact reverse-mode gradients
//! through a [`Tape`], the Adam optimizer, and a binary parameter container.

pub mod adam;
pub mod container;
pub mod conv;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod layer;
pub mod params;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use conv::{
    conv2d_backward, conv2d_forward, conv_output_size, depthwise_conv2d_backward,
    depthwise_conv2d_forward, ConvGeometry, Padding,
};
pub use error::{NnError, Result};
pub use layer::{
    affine_backward, affine_forward, relu6_backward, relu6_forward, Cache, InvertedResidual, Layer,
    LayerKind, LayerSpec, Sequential, Tape,
};
pub use params::{Grads, ParamId, ParamSet};
pub use tensor::Tensor;
