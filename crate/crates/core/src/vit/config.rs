//! Model architecture configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual/normalization arrangement of a transformer block.
///
/// `PostNorm` is the default: one residual around attention, post-layer-norm,
/// and no residual around the FFN — `Z' = FFN(LN(Z + MSA(Z)))`. `PreNorm` is
/// the conventional ViT block with pre-norm and residuals around both
/// sublayers. Both are kept because they behave differently under ablation
/// and the workbench wants the comparison available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStyle {
    PostNorm,
    PreNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnActivation {
    Gelu,
    Relu,
}

/// Vision-transformer regressor shape. All derived quantities (grid, token
/// count, head width) come from accessors so they can never drift from the
/// stored fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Input edge length after resize (square).
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Embedding width D.
    pub width: usize,
    /// Transformer depth L.
    pub layers: usize,
    /// Heads per layer H.
    pub heads: usize,
    pub ffn_dim: usize,
    /// Hidden width of both regression-head layers.
    pub head_hidden: usize,
    /// Regression output dimension; always 3 here.
    pub out_dim: usize,
    /// LoRA rank r (0 disables the adapters entirely).
    pub lora_rank: usize,
    /// LoRA scale α in W' = W + α·(A·B).
    pub lora_alpha: f64,
    pub block_style: BlockStyle,
    pub ffn_activation: FfnActivation,
    pub ln_eps: f64,
}

impl ViTConfig {
    /// Desk-scale default: small enough to train and sweep on one core.
    pub fn desk_default() -> ViTConfig {
        ViTConfig {
            image_size: 64,
            channels: 3,
            patch_size: 8,
            width: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 128,
            head_hidden: 64,
            out_dim: 3,
            lora_rank: 4,
            lora_alpha: 1.0,
            block_style: BlockStyle::PostNorm,
            ffn_activation: FfnActivation::Gelu,
            ln_eps: 1e-5,
        }
    }

    /// Reference-scale configuration (224×224, D=768, L=H=12). Constructible
    /// for shape checks; far too heavy to train here.
    pub fn base_224() -> ViTConfig {
        ViTConfig {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            width: 768,
            layers: 12,
            heads: 12,
            ffn_dim: 3072,
            head_hidden: 768,
            out_dim: 3,
            lora_rank: 4,
            lora_alpha: 1.0,
            block_style: BlockStyle::PreNorm,
            ffn_activation: FfnActivation::Gelu,
            ln_eps: 1e-5,
        }
    }

    /// Patches per image edge.
    pub fn grid_p(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length: grid² patches plus the CLS token.
    pub fn tokens(&self) -> usize {
        self.grid_p() * self.grid_p() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Flattened patch length fed to the embedding projection.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.out_dim != 3 {
            return Err(Error::invalid(format!(
                "out_dim must be 3, got {}",
                self.out_dim
            )));
        }
        if self.channels == 0
            || self.layers == 0
            || self.heads == 0
            || self.ffn_dim == 0
            || self.head_hidden == 0
        {
            return Err(Error::invalid("zero-sized model dimension"));
        }
        if self.ln_eps <= 0.0 || !self.lora_alpha.is_finite() {
            return Err(Error::invalid("bad numeric config"));
        }
        Ok(())
    }
}
