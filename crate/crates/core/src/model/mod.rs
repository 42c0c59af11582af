//! The segmentation network: a strided convolutional encoder, a stack of
//! convolutional-projection transformer blocks over the 1/8-resolution tokens,
//! and a transposed-convolution decoder, plus the two ablation variants.

mod config;
mod network;
mod params;

pub use config::{ModelConfig, Variant, DOWNSAMPLE, TRANSFORMER_ONLY_MAX_PATCH};
pub use network::{
    ClassMap, ConvTr, DownUnit, ForwardCache, Head, Prediction, Spatial, TransformerBlock, Unit, UpUnit, INPUT_CHANNELS,
};
pub use params::{ParamKind, Visit};

#[cfg(test)]
mod tests;
