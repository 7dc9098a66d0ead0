//! Encoders, fusion blocks, decoders and hash heads for both modalities,
//! wired into the double (full / visible) forward pass used for training and
//! the encoder-only path used for retrieval.

mod blocks;
pub mod checkpoint;
mod config;
mod stats;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use blocks::{Decoder, DecoderPosition, Encoded, EncoderCore, FusionBlock, HashHead, TransformerBlock, TransformerStack};
pub use config::{ModelConfig, Variant};
pub use stats::{model_stats, ComponentStats, ModelStats};

use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{FpsStart, PointCloud};
use crate::seed::derive_seed;
use crate::tokenizer::{
    apply_mask, group_points, patchify, ImageEmbed, ImageGrid, MaskPattern, MaskRecord, MaskSpec, PointEmbed, TokenSet,
};
use crate::Modality;

/// Samples per graph when encoding for retrieval.
const ENCODE_CHUNK: usize = 64;

/// How farthest point sampling chooses its first center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsMode {
    /// Always index 0.
    Deterministic,
    /// Per-sample start drawn from a seed derived from this base.
    Seeded(u64),
}

/// Patch tensor `[B, M_I, patch_dim]` for a batch of images.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub patches: Tensor,
}

impl ImageBatch {
    pub fn new(cfg: &ModelConfig, images: &[&ImageGrid]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("empty image batch"));
        }
        let mut data = Vec::with_capacity(images.len() * cfg.image_tokens() * cfg.patch_dim());
        for img in images {
            if img.height() != cfg.image_size || img.width() != cfg.image_size {
                return Err(Error::invalid(format!(
                    "image is {}x{}, model expects {}x{}",
                    img.height(),
                    img.width(),
                    cfg.image_size,
                    cfg.image_size
                )));
            }
            data.extend_from_slice(patchify(img, cfg.patch)?.data());
        }
        Ok(Self {
            patches: Tensor::new(vec![images.len(), cfg.image_tokens(), cfg.patch_dim()], data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Grouped point tokens: `groups: [B·M_P, k, 3]` center-relative,
/// `centers: [B, M_P, 3]`.
#[derive(Clone, Debug)]
pub struct PointBatch {
    pub groups: Tensor,
    pub centers: Tensor,
}

impl PointBatch {
    pub fn new(cfg: &ModelConfig, clouds: &[&PointCloud], fps: FpsMode) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::invalid("empty point batch"));
        }
        let (m, k) = (cfg.point_centers, cfg.group_size);
        let mut groups = Vec::with_capacity(clouds.len() * m * k * 3);
        let mut centers = Vec::with_capacity(clouds.len() * m * 3);
        for (i, cloud) in clouds.iter().enumerate() {
            if cloud.len() != cfg.points {
                return Err(Error::invalid(format!(
                    "cloud has {} points, model expects {}",
                    cloud.len(),
                    cfg.points
                )));
            }
            let start = match fps {
                FpsMode::Deterministic => FpsStart::First,
                FpsMode::Seeded(s) => FpsStart::Seeded(derive_seed(s, &[i as u64])),
            };
            let g = group_points(cloud, m, k, start)?;
            groups.extend(g.flat_groups());
            centers.extend(g.flat_centers());
        }
        Ok(Self {
            groups: Tensor::new(vec![clouds.len() * m, k, 3], groups)?,
            centers: Tensor::new(vec![clouds.len(), m, 3], centers)?,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Aligned image and point batches with their mask patterns.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub image: ImageBatch,
    pub point: PointBatch,
    pub image_masks: Vec<MaskPattern>,
    pub point_masks: Vec<MaskPattern>,
}

impl TrainBatch {
    pub fn new(cfg: &ModelConfig, pairs: &[(&PointCloud, &ImageGrid)], masks: &MaskSpec, fps: FpsMode) -> Result<Self> {
        masks.validate()?;
        let clouds: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let images: Vec<_> = pairs.iter().map(|p| p.1).collect();
        let sample = |modality: Modality, tokens: usize| -> Result<Vec<MaskPattern>> {
            (0..pairs.len())
                .map(|i| {
                    let seed = derive_seed(masks.seed, &[modality.code() as u64, i as u64]);
                    MaskPattern::sample(tokens, masks.ratio(modality), seed)
                })
                .collect()
        };
        Ok(Self {
            image: ImageBatch::new(cfg, &images)?,
            point: PointBatch::new(cfg, &clouds, fps)?,
            image_masks: sample(Modality::Image, cfg.image_tokens())?,
            point_masks: sample(Modality::Point, cfg.point_centers)?,
        })
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every graph value the training objective consumes.
#[derive(Clone, Debug)]
pub struct ForwardBundle {
    pub h_point: Var,
    pub h_image: Var,
    pub h_point_vis: Var,
    pub h_image_vis: Var,
    /// `[B·M_mask, patch_dim]`, absent when reconstruction is off or no
    /// token is masked.
    pub image_pred: Option<Var>,
    /// `[B·M_mask, k·3]`.
    pub point_pred: Option<Var>,
    pub image_record: MaskRecord,
    pub point_record: MaskRecord,
}

pub struct CmahModel {
    config: ModelConfig,
    seed: u64,
    pub params: ParamStore,
    image_embed: ImageEmbed,
    point_embed: PointEmbed,
    image_encoder: EncoderCore,
    point_encoder: EncoderCore,
    image_fusion: Option<FusionBlock>,
    point_fusion: Option<FusionBlock>,
    image_decoder: Option<Decoder>,
    point_decoder: Option<Decoder>,
    fusion_calls: AtomicUsize,
    decoder_calls: AtomicUsize,
}

impl std::fmt::Debug for CmahModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CmahModel")
            .field("config", &self.config)
            .field("seed", &self.seed)
            .field("params", &self.params.len())
            .finish()
    }
}

impl CmahModel {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, ParamStore::new(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Shapes only; nothing is allocated for parameter values.
    pub fn layout(config: ModelConfig) -> Result<Self> {
        Self::build(config, 0, ParamStore::layout())
    }

    fn build(config: ModelConfig, seed: u64, mut ps: ParamStore) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (di, dp, df) = (c.image_width, c.point_width, c.fusion_width());
        let image_embed = ImageEmbed::new(&mut ps, "image.encoder.embed", c.image_tokens(), c.patch_dim(), di);
        let image_encoder = EncoderCore::new(&mut ps, "image.encoder", c.image_depth, di, c.heads, c.mlp_ratio, c.code_bits)?;
        let point_embed = PointEmbed::new(&mut ps, "point.encoder.embed", c.pointnet_widths, c.pos_hidden, dp);
        let point_encoder = EncoderCore::new(&mut ps, "point.encoder", c.point_depth, dp, c.heads, c.mlp_ratio, c.code_bits)?;
        let fusion = c.variant.uses_fusion();
        let (image_fusion, point_fusion) = if fusion {
            (
                Some(FusionBlock::new(&mut ps, "image.fusion", di, dp, df, c.heads, c.mlp_ratio)?),
                Some(FusionBlock::new(&mut ps, "point.fusion", dp, di, df, c.heads, c.mlp_ratio)?),
            )
        } else {
            (None, None)
        };
        let (image_decoder, point_decoder) = if c.variant.uses_reconstruction() {
            let image_in = if fusion { df } else { di };
            (
                Some(Decoder::new(
                    &mut ps,
                    "image.decoder",
                    Some(image_in),
                    image_in,
                    c.image_tokens(),
                    true,
                    c.pos_hidden,
                    c.image_decoder_depth,
                    c.heads,
                    c.mlp_ratio,
                    c.patch_dim(),
                )?),
                Some(Decoder::new(
                    &mut ps,
                    "point.decoder",
                    Some(if fusion { df } else { dp }),
                    dp,
                    c.point_centers,
                    false,
                    c.pos_hidden,
                    c.point_decoder_depth,
                    c.heads,
                    c.mlp_ratio,
                    c.group_size * 3,
                )?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            seed,
            params: ps,
            image_embed,
            point_embed,
            image_encoder,
            point_encoder,
            image_fusion,
            point_fusion,
            image_decoder,
            point_decoder,
            fusion_calls: AtomicUsize::new(0),
            decoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fusion_calls(&self) -> usize {
        self.fusion_calls.load(Ordering::Relaxed)
    }

    pub fn decoder_calls(&self) -> usize {
        self.decoder_calls.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.fusion_calls.store(0, Ordering::Relaxed);
        self.decoder_calls.store(0, Ordering::Relaxed);
    }

    pub fn embed_image(&self, g: &mut Graph, batch: &ImageBatch) -> Result<TokenSet> {
        let x = g.constant(batch.patches.clone());
        self.image_embed.forward(g, &self.params, x)
    }

    pub fn embed_points(&self, g: &mut Graph, batch: &PointBatch) -> Result<TokenSet> {
        let groups = g.constant(batch.groups.clone());
        let centers = g.constant(batch.centers.clone());
        self.point_embed.forward(g, &self.params, groups, centers)
    }

    /// Prepend the class token and run the modality's encoder stack.
    pub fn encode(&self, g: &mut Graph, ts: &TokenSet) -> Result<Encoded> {
        self.encoder(ts.modality).encode(g, &self.params, ts)
    }

    /// Continuous hash codes from class embeddings.
    pub fn hash(&self, g: &mut Graph, modality: Modality, cls: Var) -> Result<Var> {
        self.encoder(modality).hash.forward(g, &self.params, cls)
    }

    fn encoder(&self, modality: Modality) -> &EncoderCore {
        match modality {
            Modality::Image => &self.image_encoder,
            Modality::Point => &self.point_encoder,
        }
    }

    /// Cross-modal fusion of `own` visible tokens with the other modality's
    /// full encoding.
    pub fn fuse(&self, g: &mut Graph, own: &TokenSet, other: &TokenSet) -> Result<TokenSet> {
        let block = match own.modality {
            Modality::Image => self.image_fusion.as_ref(),
            Modality::Point => self.point_fusion.as_ref(),
        }
        .ok_or_else(|| Error::invalid(format!("variant {} has no fusion block", self.config.variant.name())))?;
        self.fusion_calls.fetch_add(1, Ordering::Relaxed);
        block.forward(g, &self.params, own, other)
    }

    pub fn decode(&self, g: &mut Graph, vis: &TokenSet, record: &MaskRecord, centers: Option<Var>) -> Result<Var> {
        let dec = match vis.modality {
            Modality::Image => self.image_decoder.as_ref(),
            Modality::Point => self.point_decoder.as_ref(),
        }
        .ok_or_else(|| Error::invalid(format!("variant {} has no decoder", self.config.variant.name())))?;
        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
        dec.forward(g, &self.params, vis, record, centers)
    }

    /// Full and visible-token passes through both encoders, fusion and
    /// reconstruction.
    pub fn full_forward(&self, g: &mut Graph, batch: &TrainBatch) -> Result<ForwardBundle> {
        let c = &self.config;
        let b = batch.len();
        let image_raw = self.embed_image(g, &batch.image)?;
        let point_raw = self.embed_points(g, &batch.point)?;

        let image_full = self.encode(g, &image_raw)?;
        let point_full = self.encode(g, &point_raw)?;
        let h_image = self.hash(g, Modality::Image, image_full.cls)?;
        let h_point = self.hash(g, Modality::Point, point_full.cls)?;

        let point_targets = batch.point.groups.clone().reshape(&[b, c.point_centers, c.group_size * 3])?;
        let (image_vis, image_record) = apply_mask(g, &image_raw, &batch.image_masks, &batch.image.patches)?;
        let (point_vis, point_record) = apply_mask(g, &point_raw, &batch.point_masks, &point_targets)?;
        let image_vis = self.encode(g, &image_vis)?;
        let point_vis = self.encode(g, &point_vis)?;
        let h_image_vis = self.hash(g, Modality::Image, image_vis.cls)?;
        let h_point_vis = self.hash(g, Modality::Point, point_vis.cls)?;

        let (mut image_pred, mut point_pred) = (None, None);
        if c.variant.uses_reconstruction() {
            let (image_in, point_in) = if c.variant.uses_fusion() {
                (
                    self.fuse(g, &image_vis.tokens, &point_full.tokens)?,
                    self.fuse(g, &point_vis.tokens, &image_full.tokens)?,
                )
            } else {
                (image_vis.tokens, point_vis.tokens)
            };
            if image_record.masked_per_sample() > 0 {
                image_pred = Some(self.decode(g, &image_in, &image_record, None)?);
            }
            if point_record.masked_per_sample() > 0 {
                let centers = g.constant(batch.point.centers.clone());
                point_pred = Some(self.decode(g, &point_in, &point_record, Some(centers))?);
            }
        }
        Ok(ForwardBundle {
            h_point,
            h_image,
            h_point_vis,
            h_image_vis,
            image_pred,
            point_pred,
            image_record,
            point_record,
        })
    }

    /// Continuous codes `[n, K]` for full (unmasked) images.
    pub fn encode_images(&self, images: &[&ImageGrid]) -> Result<Tensor> {
        self.encode_chunks(images, |g, chunk| {
            let ts = self.embed_image(g, &ImageBatch::new(&self.config, chunk)?)?;
            let enc = self.encode(g, &ts)?;
            self.hash(g, Modality::Image, enc.cls)
        })
    }

    /// Continuous codes `[n, K]` for full point clouds; FPS starts at index 0.
    pub fn encode_points(&self, clouds: &[&PointCloud]) -> Result<Tensor> {
        self.encode_chunks(clouds, |g, chunk| {
            let ts = self.embed_points(g, &PointBatch::new(&self.config, chunk, FpsMode::Deterministic)?)?;
            let enc = self.encode(g, &ts)?;
            self.hash(g, Modality::Point, enc.cls)
        })
    }

    fn encode_chunks<T: Sync>(&self, items: &[T], f: impl Fn(&mut Graph, &[T]) -> Result<Var> + Sync) -> Result<Tensor> {
        let k = self.config.code_bits;
        if items.is_empty() {
            return Err(Error::invalid("nothing to encode"));
        }
        let parts = items
            .par_chunks(ENCODE_CHUNK)
            .map(|chunk| {
                let mut g = Graph::inference(self.seed);
                let h = f(&mut g, chunk)?;
                Ok(g.value(h).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![items.len(), k], parts.concat())
    }

    /// Test-time binary codes: encoder and hash head only, then `sign`.
    pub fn encode_for_retrieval(&self, samples: Samples<'_>) -> Result<Vec<Vec<i8>>> {
        let h = match samples {
            Samples::Images(images) => self.encode_images(images)?,
            Samples::Points(clouds) => self.encode_points(clouds)?,
        };
        if let Some(i) = h.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i / self.config.code_bits,
                context: format!("{} code of sample", samples.modality()),
            });
        }
        Ok(h.data().chunks(self.config.code_bits).map(binarize).collect())
    }
}

/// Single-modality inputs for retrieval encoding.
#[derive(Clone, Copy, Debug)]
pub enum Samples<'a> {
    Images(&'a [&'a ImageGrid]),
    Points(&'a [&'a PointCloud]),
}

impl Samples<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            Samples::Images(_) => Modality::Image,
            Samples::Points(_) => Modality::Point,
        }
    }
}

/// `sign` with `sign(0) = +1`.
pub fn binarize(h: &[f64]) -> Vec<i8> {
    h.iter().map(|&v| if v < 0.0 { -1 } else { 1 }).collect()
}
