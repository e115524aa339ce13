//! Student network: patch embedding, visible-only ViT encoder with
//! multi-block aggregation, light decoder with a learnable mask token,
//! and an MLP projector for the global objective.

mod params;
mod posembed;
mod student;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use params::{load_checkpoint, save_checkpoint, ModelParams};
pub use posembed::sincos_2d;
pub use student::{
    aggregate_multi_block, decode, encode_visible, forward, patch_embed, patchify, project_global, Bound,
    EncoderOutput, StudentOutput,
};

/// How per-layer encoder outputs are combined when `multi_block` is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_side: usize,
    pub in_channels: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    /// Teacher feature width the decoder and projector map to.
    pub target_dim: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the projector MLP; defaults to `embed_dim`.
    pub proj_hidden: Option<usize>,
    pub use_cls: bool,
    pub multi_block: bool,
    pub aggregate: Aggregate,
}

impl Default for ModelConfig {
    /// ViT-B/16 encoder with a 2-layer, 512-wide decoder and a ResNet-50-width target.
    fn default() -> Self {
        Self {
            image_side: 224,
            in_channels: 3,
            patch_side: 16,
            embed_dim: 768,
            enc_depth: 12,
            enc_heads: 12,
            dec_depth: 2,
            dec_width: 512,
            dec_heads: 16,
            target_dim: 2048,
            mlp_ratio: 4,
            proj_hidden: None,
            use_cls: true,
            multi_block: true,
            aggregate: Aggregate::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(format!("model.{field}"), msg));
        for (field, v) in [
            ("image_side", self.image_side),
            ("in_channels", self.in_channels),
            ("patch_side", self.patch_side),
            ("embed_dim", self.embed_dim),
            ("enc_depth", self.enc_depth),
            ("enc_heads", self.enc_heads),
            ("dec_depth", self.dec_depth),
            ("dec_width", self.dec_width),
            ("dec_heads", self.dec_heads),
            ("target_dim", self.target_dim),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return fail(field, "must be at least 1".into());
            }
        }
        if self.proj_hidden == Some(0) {
            return fail("proj_hidden", "must be at least 1".into());
        }
        if !self.image_side.is_multiple_of(self.patch_side) {
            return fail(
                "image_side",
                format!(
                    "{} is not a multiple of patch_side {}",
                    self.image_side, self.patch_side
                ),
            );
        }
        if !self.embed_dim.is_multiple_of(self.enc_heads) {
            return fail(
                "enc_heads",
                format!("{} does not divide embed_dim {}", self.enc_heads, self.embed_dim),
            );
        }
        if !self.dec_width.is_multiple_of(self.dec_heads) {
            return fail(
                "dec_heads",
                format!("{} does not divide dec_width {}", self.dec_heads, self.dec_width),
            );
        }
        // 2-D sine-cosine embeddings split channels four ways
        if !self.embed_dim.is_multiple_of(4) {
            return fail("embed_dim", format!("{} is not a multiple of 4", self.embed_dim));
        }
        if !self.dec_width.is_multiple_of(4) {
            return fail("dec_width", format!("{} is not a multiple of 4", self.dec_width));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side().pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_side * self.patch_side
    }

    pub fn proj_hidden(&self) -> usize {
        self.proj_hidden.unwrap_or(self.embed_dim)
    }
}
