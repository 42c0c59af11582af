use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::AttentionConfig;
use crate::tensor::Precision;

/// Total spatial reduction of the downsampling block.
pub const DOWNSAMPLE: usize = 8;
/// Largest crop the full-resolution transformer variant accepts; attention memory grows
/// with the fourth power of the side length.
pub const TRANSFORMER_ONLY_MAX_PATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Downsampling, transformer core, upsampling.
    ConvTr,
    /// Downsampling and upsampling only.
    AutoEncoder,
    /// The transformer core at full resolution between pointwise entry and exit maps.
    TransformerOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::ConvTr, Variant::AutoEncoder, Variant::TransformerOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ConvTr => "convtr",
            Variant::AutoEncoder => "autoencoder",
            Variant::TransformerOnly => "transformer_only",
        }
    }

    pub fn has_core(self) -> bool {
        self != Variant::AutoEncoder
    }

    pub fn has_sampling(self) -> bool {
        self != Variant::TransformerOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (expected convtr, autoencoder or transformer_only)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Crop side length P.
    pub patch: usize,
    pub classes: usize,
    /// Number of transformer blocks L.
    pub depth: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Channel progression of the downsampling block; the last entry is the token width.
    pub widths: [usize; 4],
    pub variant: Variant,
    pub precision: Precision,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 512,
            classes: 3,
            depth: 5,
            heads: 5,
            d_head: 24,
            widths: [32, 32, 64, 128],
            variant: Variant::ConvTr,
            precision: Precision::Single,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.widths[3]
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { heads: self.heads, d_model: self.d_model(), d_head: self.d_head }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(2..=255).contains(&self.classes) {
            return bad(format!("model.classes = {} must be in [2, 255]", self.classes));
        }
        if self.patch == 0 {
            return bad("model.patch must be positive".into());
        }
        if self.widths.contains(&0) {
            return bad(format!("model.widths {:?} must be positive", self.widths));
        }
        if self.variant.has_core() {
            if self.depth == 0 {
                return bad("model.depth must be at least 1".into());
            }
            if self.heads == 0 || self.d_head == 0 {
                return bad("model.heads and model.d_head must be positive".into());
            }
        }
        if self.variant.has_sampling() && self.patch % DOWNSAMPLE != 0 {
            return bad(format!("model.patch = {} must be divisible by {DOWNSAMPLE}", self.patch));
        }
        if self.variant == Variant::TransformerOnly && self.patch > TRANSFORMER_ONLY_MAX_PATCH {
            return bad(format!(
                "variant transformer_only is limited to crops of at most {TRANSFORMER_ONLY_MAX_PATCH}x{TRANSFORMER_ONLY_MAX_PATCH} pixels \
                 (attention memory overflow); got model.patch = {}",
                self.patch
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || !(self.bn_eps > 0.0) {
            return bad(format!("batch-norm momentum {} / eps {} out of range", self.bn_momentum, self.bn_eps));
        }
        Ok(())
    }

    /// Token count seen by the attention layers for an `h × w` input.
    pub fn tokens(&self, h: usize, w: usize) -> usize {
        match self.variant {
            Variant::ConvTr => (h / DOWNSAMPLE) * (w / DOWNSAMPLE),
            Variant::AutoEncoder => 0,
            Variant::TransformerOnly => h * w,
        }
    }

    /// Attention score matrix entries per head and per block for an `h × w` input.
    pub fn score_elements_per_head(&self, h: usize, w: usize) -> u128 {
        AttentionConfig::score_elements(self.tokens(h, w))
    }

    /// Multiply-accumulate count of all attention layers for one `h × w` input.
    pub fn attention_macs(&self, h: usize, w: usize) -> u128 {
        if !self.variant.has_core() {
            return 0;
        }
        self.depth as u128 * self.attention().attention_macs(self.tokens(h, w))
    }
}
