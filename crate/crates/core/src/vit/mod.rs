//! Toy-scale ViT masked-autoencoder components.

mod decoder;
mod embed;
mod layers;
mod mask;
mod params;

pub use decoder::{normalize_patches, reconstruction_loss, Bridge, Decoder};
pub use embed::{patchify, sincos_pos_embed, unpatchify, PatchEmbed};
pub use layers::{LayerNormParams, Linear, TransformerLayer};
pub use mask::{incremental_drop, keep_count, random_mask, sample_masks, MaskState, PatchBatch};
pub use params::{normal_init, xavier_uniform, Param, ParamStore};

use crate::error::{BimError, Result};
use crate::tensor::{Graph, NodeId, Scalar};

/// Decode a block's visible tokens into predictions for all patches.
pub fn local_decoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bridge: &Bridge,
    decoder: &Decoder<T>,
    block_output: NodeId,
    masks: &[MaskState],
) -> Result<NodeId> {
    decoder.forward(g, store, bridge, block_output, masks)
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    /// Attention heads in decoder layers. The toy decoder keeps a 32-wide
    /// head, so `decoder_dim = 32` gives one head.
    pub decoder_heads: usize,
    pub norm_pix: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelSpec {
    /// 32x32 RGB images, 4x4 patches (64 tokens), 8 layers of width 64.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 8,
            heads: 4,
            mlp_ratio: 4,
            decoder_dim: 32,
            decoder_depth: 1,
            decoder_heads: 1,
            norm_pix: false,
        }
    }

    /// Small enough for f64 gradient checks and many-step replays.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch_size: 2,
            channels: 1,
            embed_dim: 8,
            depth: 4,
            heads: 2,
            mlp_ratio: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_heads: 2,
            norm_pix: false,
        }
    }

    fn full_scale(embed_dim: usize, depth: usize, heads: usize, patch_size: usize) -> Self {
        Self {
            image_size: 224,
            patch_size,
            channels: 3,
            embed_dim,
            depth,
            heads,
            mlp_ratio: 4,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            norm_pix: false,
        }
    }

    pub fn vit_base() -> Self {
        Self::full_scale(768, 12, 12, 16)
    }

    pub fn vit_large() -> Self {
        Self::full_scale(1024, 24, 16, 16)
    }

    pub fn vit_huge() -> Self {
        Self::full_scale(1280, 32, 16, 14)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "tiny" => Some(Self::tiny()),
            "vit-base" => Some(Self::vit_base()),
            "vit-large" => Some(Self::vit_large()),
            "vit-huge" => Some(Self::vit_huge()),
            _ => None,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn decoder_mlp_dim(&self) -> usize {
        self.decoder_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("decoder_dim", self.decoder_dim),
            ("decoder_depth", self.decoder_depth),
            ("decoder_heads", self.decoder_heads),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(BimError::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(BimError::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(BimError::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return Err(BimError::Config(format!(
                "decoder_dim {} is not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            )));
        }
        if !self.embed_dim.is_multiple_of(4) || !self.decoder_dim.is_multiple_of(4) {
            return Err(BimError::Config(
                "embed_dim and decoder_dim must be divisible by 4 for 2D sin-cos positions".into(),
            ));
        }
        Ok(())
    }
}
