//! Vision-transformer encoder with explicit per-layer parameter groups.
//!
//! Parameters live in a [`ParamSet`], partitioned into groups
//! (`embedding`, `block_1` … `block_L`, `final_norm`, optional `head`).
//! Every forward function reads weights from a `ParamSet` by name, which makes
//! freezing, truncation and checkpointing plain map operations.

mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};

pub use forward::{
    embed_patches, extract_intermediate, forward_features, forward_prenorm, patchify, pool,
    run_blocks, FeatureTap,
};
pub(crate) use forward::{block_forward, prepend_class_token};
pub use forward::final_norm;
pub use params::{init_vit, truncate, ArrayMap, ParamSet};
pub(crate) use params::{block_shapes, init_tensor, keyed_rng, tensor_le_bytes, InitKind};

/// How a per-sample embedding is read from the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    ClassToken,
    MeanPatch,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_token" => Ok(Pooling::ClassToken),
            "mean_patch" => Ok(Pooling::MeanPatch),
            other => Err(config_err!("unknown pooling mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub in_channels: usize,
    pub use_class_token: bool,
    pub pooling: Pooling,
}

impl Default for ViTConfig {
    /// Desk-scale encoder: 12 blocks like ViT-B, but 64×64 inputs and width 32.
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            depth: 12,
            embed_dim: 32,
            num_heads: 4,
            mlp_ratio: 2.0,
            in_channels: 1,
            use_class_token: true,
            pooling: Pooling::ClassToken,
        }
    }
}

impl ViTConfig {
    /// ViT-B/16 at 224×224.
    pub fn vit_base_16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            depth: 12,
            embed_dim: 768,
            num_heads: 12,
            mlp_ratio: 4.0,
            in_channels: 3,
            use_class_token: true,
            pooling: Pooling::ClassToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 {
            return Err(config_err!("image_size and patch_size must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(config_err!(
                "image_size mod patch_size must be 0 (got {} mod {})",
                self.image_size,
                self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(config_err!(
                "embed_dim mod num_heads must be 0 (got {} mod {})",
                self.embed_dim,
                self.num_heads
            ));
        }
        if self.depth < 1 {
            return Err(config_err!("depth must be >= 1"));
        }
        if self.in_channels < 1 {
            return Err(config_err!("in_channels must be >= 1"));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(config_err!("mlp_ratio must give a positive hidden width"));
        }
        if self.pooling == Pooling::ClassToken && !self.use_class_token {
            return Err(config_err!("pooling class_token requires use_class_token"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count of a full forward: patches plus the optional class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Identifier of a parameter group. Ordering follows the network from input to output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupId {
    Embedding,
    /// 1-indexed transformer block.
    Block(usize),
    FinalNorm,
    Head,
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Embedding => write!(f, "embedding"),
            GroupId::Block(i) => write!(f, "block_{i}"),
            GroupId::FinalNorm => write!(f, "final_norm"),
            GroupId::Head => write!(f, "head"),
        }
    }
}

impl FromStr for GroupId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(GroupId::Embedding),
            "final_norm" => Ok(GroupId::FinalNorm),
            "head" => Ok(GroupId::Head),
            _ => s
                .strip_prefix("block_")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(GroupId::Block)
                .ok_or_else(|| Error::Format(format!("unknown parameter group `{s}`"))),
        }
    }
}

impl Serialize for GroupId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive, 1-indexed range of transformer blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub lo: usize,
    pub hi: usize,
}

impl LayerRange {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.lo < 1 || self.lo > self.hi || self.hi > depth {
            return Err(input_err!(
                "layer range {}-{} must satisfy 1 <= lo <= hi <= {depth}",
                self.lo,
                self.hi
            ));
        }
        Ok(())
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.lo..=self.hi).contains(&layer)
    }

    pub fn len(&self) -> usize {
        self.hi + 1 - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi < self.lo
    }

    /// The four contiguous quarters of an `L`-block network (`L` divisible by 4).
    pub fn quarters(depth: usize) -> Result<[LayerRange; 4]> {
        if depth % 4 != 0 || depth == 0 {
            return Err(config_err!("quarters need depth divisible by 4, got {depth}"));
        }
        let q = depth / 4;
        Ok([0, 1, 2, 3].map(|i| LayerRange::new(i * q + 1, (i + 1) * q)))
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

impl FromStr for LayerRange {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once('-')
            .ok_or_else(|| config_err!("layer range must look like `lo-hi`, got `{s}`"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| config_err!("bad layer index `{v}` in `{s}`"))
        };
        Ok(LayerRange::new(parse(lo)?, parse(hi)?))
    }
}
