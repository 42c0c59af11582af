//! Differentiable layers. Each layer exposes a pure forward pass and an
//! explicit backward pass that returns the input gradient and accumulates
//! parameter gradients into the parameters' grad buffers.

mod attention;
mod conv;
mod kernels;
mod norm;
mod projection;

pub use attention::{
    flatten_tokens, unflatten_tokens, AttentionCache, AttentionConfig, Linear, MultiHeadAttention, ProjectionTriple,
};
pub use conv::{Conv2d, ConvTranspose2d, DepthwiseConv2d, PointwiseConv};
pub use norm::{relu, relu_backward, BatchNorm2d, BatchNormCache, Mode};
pub(crate) use norm::relu_inplace;
pub use projection::{ConvProjection, ProjectionBranch};

#[cfg(test)]
mod tests;
