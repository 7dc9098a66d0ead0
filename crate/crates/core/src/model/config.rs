use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parts of the training objective and architecture are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Decoders read their own visible encodings; no cross-modal fusion.
    NoFusion,
    /// Contrastive objective only; no fusion blocks or decoders.
    NoReconstruction,
    /// Reconstruction objective only.
    NoContrastive,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoFusion, Variant::NoReconstruction, Variant::NoContrastive];

    pub fn uses_fusion(self) -> bool {
        matches!(self, Variant::Full | Variant::NoContrastive)
    }

    pub fn uses_reconstruction(self) -> bool {
        !matches!(self, Variant::NoReconstruction)
    }

    pub fn uses_contrastive(self) -> bool {
        !matches!(self, Variant::NoContrastive)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFusion => "no-fusion",
            Variant::NoReconstruction => "no-reconstruction",
            Variant::NoContrastive => "no-contrastive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub image_width: usize,
    pub points: usize,
    pub point_centers: usize,
    pub group_size: usize,
    pub point_width: usize,
    pub pointnet_widths: [usize; 3],
    pub pos_hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub image_depth: usize,
    pub point_depth: usize,
    pub image_decoder_depth: usize,
    pub point_decoder_depth: usize,
    pub code_bits: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// ViT-Base image encoder and Point-MAE-sized point encoder.
    pub fn paper() -> Self {
        Self {
            image_size: 224,
            patch: 16,
            image_width: 768,
            points: 1024,
            point_centers: 64,
            group_size: 32,
            point_width: 384,
            pointnet_widths: [128, 256, 512],
            pos_hidden: 128,
            heads: 12,
            mlp_ratio: 4,
            image_depth: 12,
            point_depth: 12,
            image_decoder_depth: 8,
            point_decoder_depth: 4,
            code_bits: 64,
            variant: Variant::Full,
        }
    }

    /// Small preset that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            image_width: 64,
            points: 256,
            point_centers: 16,
            group_size: 16,
            point_width: 32,
            pointnet_widths: [32, 64, 64],
            pos_hidden: 32,
            heads: 4,
            mlp_ratio: 4,
            image_depth: 2,
            point_depth: 2,
            image_decoder_depth: 1,
            point_decoder_depth: 1,
            code_bits: 16,
            variant: Variant::Full,
        }
    }

    pub fn with_bits(mut self, bits: usize) -> Self {
        self.code_bits = bits;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn image_tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Width of both fused token streams.
    pub fn fusion_width(&self) -> usize {
        self.image_width
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("image_width", self.image_width),
            ("points", self.points),
            ("point_centers", self.point_centers),
            ("group_size", self.group_size),
            ("point_width", self.point_width),
            ("pos_hidden", self.pos_hidden),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("code_bits", self.code_bits),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        if self.pointnet_widths.contains(&0) {
            return Err(Error::invalid("model config: pointnet widths must be positive"));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::invalid(format!(
                "model config: image size {} is not a multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        for w in [self.image_width, self.point_width] {
            if w % self.heads != 0 {
                return Err(Error::invalid(format!(
                    "model config: {} heads do not divide width {w}",
                    self.heads
                )));
            }
        }
        if self.point_centers > self.points || self.group_size > self.points {
            return Err(Error::invalid(format!(
                "model config: {} centers of {} neighbors need at most {} points",
                self.point_centers, self.group_size, self.points
            )));
        }
        Ok(())
    }
}
