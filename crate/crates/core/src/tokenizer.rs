//! Image patch and point-group tokenization, plus random token masking.
//!
//! Patch vectors flatten each `patch × patch × 3` block in (row, column,
//! channel) order; patches themselves are numbered row-major over the grid.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{fps, knn_group, FpsStart, GroupedCloud, PointCloud};
use crate::nn::{Linear, INIT_STD};
use crate::Modality;

/// An `H × W × 3` raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("image must be non-empty, got {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::shape("image", &[height, width, 3], &[pixels.len()]));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("pixel value {} at {i} outside [0, 1]", pixels[i])));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[(row * self.width + col) * 3 + channel]
    }

    pub(crate) fn set_rgb(&mut self, row: usize, col: usize, value: f64) {
        let o = (row * self.width + col) * 3;
        self.pixels[o..o + 3].fill(value);
    }
}

fn check_patch(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::invalid(format!(
            "image {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok(())
}

/// `[M, patch² · 3]` patch matrix.
pub fn patchify(img: &ImageGrid, patch: usize) -> Result<Tensor> {
    check_patch(img.height, img.width, patch)?;
    let (gh, gw) = (img.height / patch, img.width / patch);
    let dim = patch * patch * 3;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let o = ((pr * patch + r) * img.width + pc * patch) * 3;
                out.extend_from_slice(&img.pixels[o..o + patch * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, patch: usize) -> Result<ImageGrid> {
    check_patch(height, width, patch)?;
    let (gh, gw) = (height / patch, width / patch);
    let dim = patch * patch * 3;
    if patches.shape() != [gh * gw, dim] {
        return Err(Error::shape("unpatchify", patches.shape(), &[gh * gw, dim]));
    }
    let mut pixels = vec![0.0; height * width * 3];
    let src = patches.data();
    for pr in 0..gh {
        for pc in 0..gw {
            let p = &src[(pr * gw + pc) * dim..][..dim];
            for r in 0..patch {
                let o = ((pr * patch + r) * width + pc * patch) * 3;
                pixels[o..o + patch * 3].copy_from_slice(&p[r * patch * 3..(r + 1) * patch * 3]);
            }
        }
    }
    ImageGrid::new(height, width, pixels)
}

/// FPS centers followed by k-NN grouping.
pub fn group_points(cloud: &PointCloud, centers: usize, k: usize, start: FpsStart) -> Result<GroupedCloud> {
    let idx = fps(cloud, centers, start)?;
    knn_group(cloud, &idx, k)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Masked token count: `round(ratio · m)` clamped so one token stays visible.
pub fn mask_count(m: usize, ratio: f64) -> Result<usize> {
    check_ratio(ratio)?;
    Ok(((ratio * m as f64).round() as usize).min(m.saturating_sub(1)))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskSpec {
    pub ratio_image: f64,
    pub ratio_point: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio_image)?;
        check_ratio(self.ratio_point)
    }

    pub fn ratio(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Image => self.ratio_image,
            Modality::Point => self.ratio_point,
        }
    }
}

/// Visible/masked partition of `0..len`, both sides ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPattern {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskPattern {
    pub fn sample(m: usize, ratio: f64, seed: u64) -> Result<Self> {
        let count = mask_count(m, ratio)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flags = vec![false; m];
        for i in index::sample(&mut rng, m, count) {
            flags[i] = true;
        }
        Ok(Self::from_flags(&flags))
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        let (mut masked, mut visible) = (vec![], vec![]);
        for (i, &f) in flags.iter().enumerate() {
            if f {
                masked.push(i);
            } else {
                visible.push(i);
            }
        }
        Self { masked, visible }
    }

    pub fn len(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Boolean view, `true` = masked.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.len()];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Raw,
    Encoded,
    Fused,
    Decoded,
}

/// A batch of token sequences living in a graph: `var` has shape
/// `[batch, len, width]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenSet {
    pub var: Var,
    pub batch: usize,
    pub len: usize,
    pub width: usize,
    pub modality: Modality,
    pub stage: Stage,
}

impl TokenSet {
    pub fn new(g: &Graph, var: Var, modality: Modality, stage: Stage) -> Result<Self> {
        match *g.shape(var) {
            [batch, len, width] => Ok(Self {
                var,
                batch,
                len,
                width,
                modality,
                stage,
            }),
            ref s => Err(Error::shape("token set", s, &[0, 0, 0])),
        }
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::invalid(format!(
                "{:?} tokens are at stage {:?}, expected {stage:?}",
                self.modality, self.stage
            )));
        }
        Ok(())
    }
}

/// Which tokens were hidden per sample and their reconstruction targets.
#[derive(Clone, Debug)]
pub struct MaskRecord {
    pub modality: Modality,
    pub patterns: Vec<MaskPattern>,
    /// `[batch · masked_per_sample, target_dim]`, sample-major, masked
    /// positions ascending.
    pub targets: Tensor,
}

impl MaskRecord {
    pub fn batch(&self) -> usize {
        self.patterns.len()
    }

    pub fn tokens(&self) -> usize {
        self.patterns[0].len()
    }

    pub fn masked_per_sample(&self) -> usize {
        self.patterns[0].masked.len()
    }

    pub fn visible_per_sample(&self) -> usize {
        self.patterns[0].visible.len()
    }
}

/// Keep the visible tokens of a raw token set.
///
/// `targets` is `[batch, len, target_dim]`; rows at masked positions are
/// copied into the returned record.
pub fn apply_mask(g: &mut Graph, ts: &TokenSet, patterns: &[MaskPattern], targets: &Tensor) -> Result<(TokenSet, MaskRecord)> {
    ts.expect_stage(Stage::Raw)?;
    if patterns.len() != ts.batch {
        return Err(Error::invalid(format!("{} mask patterns for batch {}", patterns.len(), ts.batch)));
    }
    let n_mask = patterns[0].masked.len();
    for p in patterns {
        if p.len() != ts.len || p.masked.len() != n_mask {
            return Err(Error::invalid(format!(
                "mask pattern over {} tokens with {} masked does not fit {} tokens with {n_mask} masked",
                p.len(),
                p.masked.len(),
                ts.len
            )));
        }
    }
    let ts_shape = targets.shape();
    if ts_shape.len() != 3 || ts_shape[0] != ts.batch || ts_shape[1] != ts.len {
        return Err(Error::shape("apply_mask targets", ts_shape, &[ts.batch, ts.len]));
    }
    let tdim = ts_shape[2];
    let n_vis = ts.len - n_mask;

    let mut vis_idx = Vec::with_capacity(ts.batch * n_vis);
    let mut tgt = Vec::with_capacity(ts.batch * n_mask * tdim);
    for (b, p) in patterns.iter().enumerate() {
        vis_idx.extend(p.visible.iter().map(|&j| b * ts.len + j));
        for &j in &p.masked {
            tgt.extend_from_slice(&targets.data()[(b * ts.len + j) * tdim..][..tdim]);
        }
    }
    let flat = g.reshape(ts.var, &[ts.batch * ts.len, ts.width])?;
    let vis = g.embedding(flat, &vis_idx)?;
    let vis = g.reshape(vis, &[ts.batch, n_vis, ts.width])?;
    let targets = if n_mask == 0 {
        Tensor::zeros(&[0])
    } else {
        Tensor::new(vec![ts.batch * n_mask, tdim], tgt)?
    };
    Ok((
        TokenSet {
            var: vis,
            len: n_vis,
            ..*ts
        },
        MaskRecord {
            modality: ts.modality,
            patterns: patterns.to_vec(),
            targets,
        },
    ))
}

/// Linear patch projection plus a learnable positional table.
#[derive(Clone, Debug)]
pub struct ImageEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub tokens: usize,
    pub width: usize,
}

impl ImageEmbed {
    pub fn new(ps: &mut ParamStore, name: &str, tokens: usize, patch_dim: usize, width: usize) -> Self {
        Self {
            proj: Linear::new(ps, &format!("{name}.proj"), patch_dim, width),
            pos: ps.register(format!("{name}.pos"), &[tokens, width], Init::TruncNormal(INIT_STD), false),
            tokens,
            width,
        }
    }

    /// `patches: [B, M, patch_dim]` → raw image tokens.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, patches: Var) -> Result<TokenSet> {
        let s = g.shape(patches).to_vec();
        if s.len() != 3 || s[1] != self.tokens || s[2] != self.proj.in_dim {
            return Err(Error::shape("embed_image", &s, &[self.tokens, self.proj.in_dim]));
        }
        let x = self.proj.forward(g, ps, patches)?;
        let pos = g.param(ps, self.pos)?;
        let x = g.add(x, pos)?;
        TokenSet::new(g, x, Modality::Image, Stage::Raw)
    }
}

/// Mini-PointNet group encoder plus an MLP positional embedding of the
/// group centers.
#[derive(Clone, Debug)]
pub struct PointEmbed {
    pub point1: Linear,
    pub point2: Linear,
    pub group1: Linear,
    pub group2: Linear,
    pub pos1: Linear,
    pub pos2: Linear,
    pub width: usize,
}

impl PointEmbed {
    /// `widths = [c1, c2, c3]`: per-point `3 → c1 → c2`, max pool, then
    /// `c2 → c3 → width`.
    pub fn new(ps: &mut ParamStore, name: &str, widths: [usize; 3], pos_hidden: usize, width: usize) -> Self {
        let [c1, c2, c3] = widths;
        Self {
            point1: Linear::new(ps, &format!("{name}.point1"), 3, c1),
            point2: Linear::new(ps, &format!("{name}.point2"), c1, c2),
            group1: Linear::new(ps, &format!("{name}.group1"), c2, c3),
            group2: Linear::new(ps, &format!("{name}.group2"), c3, width),
            pos1: Linear::new(ps, &format!("{name}.pos1"), 3, pos_hidden),
            pos2: Linear::new(ps, &format!("{name}.pos2"), pos_hidden, width),
            width,
        }
    }

    /// Group features only: `groups: [G, k, 3]` → `[G, width]`.
    pub fn group_features(&self, g: &mut Graph, ps: &ParamStore, groups: Var) -> Result<Var> {
        let s = g.shape(groups).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape("embed_points", &s, &[0, 0, 3]));
        }
        let (n_groups, k) = (s[0], s[1]);
        let x = g.reshape(groups, &[n_groups * k, 3])?;
        let x = self.point1.forward(g, ps, x)?;
        let x = g.relu(x);
        let x = self.point2.forward(g, ps, x)?;
        let x = g.reshape(x, &[n_groups, k, self.point2.out_dim])?;
        let x = g.max_axis(x, 1)?;
        let x = self.group1.forward(g, ps, x)?;
        let x = g.relu(x);
        self.group2.forward(g, ps, x)
    }

    /// Center positional embedding: `centers: [.., 3]` → `[.., width]`.
    pub fn position(&self, g: &mut Graph, ps: &ParamStore, centers: Var) -> Result<Var> {
        let x = self.pos1.forward(g, ps, centers)?;
        let x = g.gelu(x);
        self.pos2.forward(g, ps, x)
    }

    /// `groups: [B·M, k, 3]`, `centers: [B, M, 3]` → raw point tokens.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, groups: Var, centers: Var) -> Result<TokenSet> {
        let cs = g.shape(centers).to_vec();
        if cs.len() != 3 || cs[2] != 3 || g.shape(groups).first() != Some(&(cs[0] * cs[1])) {
            return Err(Error::shape("embed_points", g.shape(groups), &cs));
        }
        let feats = self.group_features(g, ps, groups)?;
        let feats = g.reshape(feats, &[cs[0], cs[1], self.width])?;
        let pos = self.position(g, ps, centers)?;
        let x = g.add(feats, pos)?;
        TokenSet::new(g, x, Modality::Point, Stage::Raw)
    }
}
