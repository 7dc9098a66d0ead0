//! Training objectives: InfoNCE contrast between code families, Chamfer
//! point reconstruction, pixel MSE, and their unweighted sum.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardBundle, Variant};

/// Additive logit mask for excluded entries; `exp` of it underflows to 0.
const EXCLUDED: f64 = -1e9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

impl Similarity {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        match self {
            Similarity::Dot => dot,
            Similarity::Cosine => {
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                dot / (na * nb)
            }
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Single-anchor InfoNCE term
/// `-log(e^{s+/τ} / (e^{s+/τ} + Σ e^{s-/τ}))`, evaluated via log-sum-exp.
pub fn nce_unit(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64, sim: Similarity) -> Result<f64> {
    check_tau(tau)?;
    let pos = sim.eval(anchor, positive) / tau;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(pos);
    logits.extend(negatives.iter().map(|n| sim.eval(anchor, n) / tau));
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok((lse - pos).max(0.0))
}

/// One of the four hash-code families produced by the double forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CodeFamily {
    PointFull,
    ImageFull,
    PointMasked,
    ImageMasked,
}

impl CodeFamily {
    fn is_masked(self) -> bool {
        matches!(self, CodeFamily::PointMasked | CodeFamily::ImageMasked)
    }

    fn is_point(self) -> bool {
        matches!(self, CodeFamily::PointFull | CodeFamily::PointMasked)
    }
}

/// The three admissible cross-modal contrastive pairings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContrastTerm {
    /// Full points against full images.
    FullFull,
    /// Full points against masked images.
    FullMasked,
    /// Masked points against full images.
    MaskedFull,
}

impl ContrastTerm {
    pub const ALL: [ContrastTerm; 3] = [ContrastTerm::FullFull, ContrastTerm::FullMasked, ContrastTerm::MaskedFull];

    /// Point family first, image family second.
    pub fn families(self) -> (CodeFamily, CodeFamily) {
        match self {
            ContrastTerm::FullFull => (CodeFamily::PointFull, CodeFamily::ImageFull),
            ContrastTerm::FullMasked => (CodeFamily::PointFull, CodeFamily::ImageMasked),
            ContrastTerm::MaskedFull => (CodeFamily::PointMasked, CodeFamily::ImageFull),
        }
    }

    /// Registry lookup. Same-modality pairs and the masked-masked pairing
    /// are rejected.
    pub fn from_families(a: CodeFamily, b: CodeFamily) -> Result<Self> {
        if a.is_point() == b.is_point() {
            return Err(Error::invalid(format!("contrast between {a:?} and {b:?} is not cross-modal")));
        }
        let (p, i) = if a.is_point() { (a, b) } else { (b, a) };
        match (p.is_masked(), i.is_masked()) {
            (false, false) => Ok(ContrastTerm::FullFull),
            (false, true) => Ok(ContrastTerm::FullMasked),
            (true, false) => Ok(ContrastTerm::MaskedFull),
            (true, true) => Err(Error::invalid(
                "masked-masked contrast is not part of the objective (both views are corrupted)",
            )),
        }
    }
}

/// Which in-batch codes act as negatives for anchor `i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSet {
    /// Both families of the term, excluding index `i`.
    #[default]
    BothFamilies,
    /// Only the other family, excluding index `i`.
    CrossOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub negatives: NegativeSet,
    /// Standardize each target patch before the pixel MSE.
    pub normalize_pixels: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            negatives: NegativeSet::BothFamilies,
            normalize_pixels: false,
        }
    }
}

/// Symmetric in-batch InfoNCE between aligned code matrices `a, b: [B, K]`
/// using cosine similarity: the mean of `2B` anchor terms.
pub fn contrast_pair(g: &mut Graph, a: Var, b: Var, tau: f64, negatives: NegativeSet) -> Result<Var> {
    check_tau(tau)?;
    if g.shape(a) != g.shape(b) || g.shape(a).len() != 2 {
        return Err(Error::shape("contrast", g.shape(a), g.shape(b)));
    }
    let n = g.shape(a)[0];
    let s = g.concat(&[a, b], 0)?;
    let s = g.l2_normalize(s)?;
    let st = g.transpose(s)?;
    let logits = g.matmul(s, st)?;
    let logits = g.scale(logits, 1.0 / tau);

    let m = 2 * n;
    let mut mask = vec![0.0; m * m];
    let mut pick = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let same_family = (i < n) == (j < n);
            if i == j || (same_family && negatives == NegativeSet::CrossOnly) {
                mask[i * m + j] = EXCLUDED;
            }
        }
        let partner = (i + n) % m;
        pick[i * m + partner] = 1.0;
    }
    let mask = g.constant(Tensor::new(vec![m, m], mask)?);
    let pick = g.constant(Tensor::new(vec![m, m], pick)?);
    let masked = g.add(logits, mask)?;
    let lse = g.logsumexp(masked)?;
    let lse = g.mean(lse);
    let pos = g.mul(logits, pick)?;
    let pos = g.sum(pos);
    let pos = g.scale(pos, 1.0 / m as f64);
    g.sub(lse, pos)
}

/// The four code matrices of one batch as graph values.
#[derive(Clone, Copy, Debug)]
pub struct CodeVars {
    pub point: Var,
    pub image: Var,
    pub point_vis: Var,
    pub image_vis: Var,
}

impl CodeVars {
    pub fn from_bundle(b: &ForwardBundle) -> Self {
        Self {
            point: b.h_point,
            image: b.h_image,
            point_vis: b.h_point_vis,
            image_vis: b.h_image_vis,
        }
    }

    pub fn family(&self, f: CodeFamily) -> Var {
        match f {
            CodeFamily::PointFull => self.point,
            CodeFamily::ImageFull => self.image,
            CodeFamily::PointMasked => self.point_vis,
            CodeFamily::ImageMasked => self.image_vis,
        }
    }
}

pub fn contrast_term(g: &mut Graph, codes: &CodeVars, term: ContrastTerm, cfg: &LossConfig) -> Result<Var> {
    let (p, i) = term.families();
    contrast_pair(g, codes.family(p), codes.family(i), cfg.tau, cfg.negatives)
}

/// Chamfer reconstruction loss.
///
/// `pred`, `target`: `[G, k·3]` rows, one per masked token across the
/// batch. Returns the sum of per-token Chamfer distances over `G·k`, which
/// equals the batch mean of each sample's sum scaled by `1/(M_mask·k)`.
pub fn recon_3d(g: &mut Graph, pred: Var, target: Var, k: usize) -> Result<Var> {
    if g.shape(pred) != g.shape(target) || g.shape(pred).len() != 2 || k == 0 || g.shape(pred)[1] != 3 * k {
        return Err(Error::shape("recon_3d", g.shape(pred), g.shape(target)));
    }
    let n = g.shape(pred)[0];
    let p = g.reshape(pred, &[n, k, 3])?;
    let t = g.reshape(target, &[n, k, 3])?;
    let c = g.chamfer(p, t)?;
    let s = g.sum(c);
    Ok(g.scale(s, 1.0 / (n * k) as f64))
}

/// Mean squared pixel error over every masked patch entry.
pub fn recon_2d(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape("recon_2d", g.shape(pred), g.shape(target)));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Per-row standardization of patch targets (`[G, D]`).
pub fn normalize_patches(t: &Tensor) -> Tensor {
    let d = *t.shape().last().unwrap_or(&1);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// All six logged loss scalars.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ff: f64,
    pub fm: f64,
    pub mf: f64,
    pub recon_3d: f64,
    pub recon_2d: f64,
    pub overall: f64,
}

impl LossBreakdown {
    pub fn contrastive(&self) -> f64 {
        self.ff + self.fm + self.mf
    }

    pub fn reconstruction(&self) -> f64 {
        self.recon_3d + self.recon_2d
    }

    pub fn is_finite(&self) -> bool {
        [self.ff, self.fm, self.mf, self.recon_3d, self.recon_2d, self.overall]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L_overall = (L_ff + L_fm + L_mf) + (L_3D + L_2D)`, with terms disabled
/// by the variant left out.
pub fn overall(
    g: &mut Graph,
    bundle: &ForwardBundle,
    cfg: &LossConfig,
    variant: Variant,
    group_size: usize,
) -> Result<(Var, LossBreakdown)> {
    let codes = CodeVars::from_bundle(bundle);
    let mut terms = Vec::with_capacity(5);
    let mut br = LossBreakdown::default();
    if variant.uses_contrastive() {
        for term in ContrastTerm::ALL {
            let v = contrast_term(g, &codes, term, cfg)?;
            let x = g.value(v).item();
            match term {
                ContrastTerm::FullFull => br.ff = x,
                ContrastTerm::FullMasked => br.fm = x,
                ContrastTerm::MaskedFull => br.mf = x,
            }
            terms.push(v);
        }
    }
    if variant.uses_reconstruction() {
        if let Some(pred) = bundle.point_pred {
            let t = g.constant(bundle.point_record.targets.clone());
            let v = recon_3d(g, pred, t, group_size)?;
            br.recon_3d = g.value(v).item();
            terms.push(v);
        }
        if let Some(pred) = bundle.image_pred {
            let target = if cfg.normalize_pixels {
                normalize_patches(&bundle.image_record.targets)
            } else {
                bundle.image_record.targets.clone()
            };
            let t = g.constant(target);
            let v = recon_2d(g, pred, t)?;
            br.recon_2d = g.value(v).item();
            terms.push(v);
        }
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for t in terms {
        total = g.add(total, t)?;
    }
    br.overall = g.value(total).item();
    Ok((total, br))
}

/// Value-level access to the contrastive losses on plain code matrices.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub point: Tensor,
    pub image: Tensor,
    pub point_vis: Tensor,
    pub image_vis: Tensor,
    pub tau: f64,
    pub negatives: NegativeSet,
}

impl ContrastiveBatch {
    pub fn new(point: Tensor, image: Tensor, point_vis: Tensor, image_vis: Tensor, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        let s = point.shape().to_vec();
        if s.len() != 2 || [&image, &point_vis, &image_vis].iter().any(|t| t.shape() != s.as_slice()) {
            return Err(Error::invalid("contrastive batch needs four code matrices of equal [B, K] shape"));
        }
        Ok(Self {
            point,
            image,
            point_vis,
            image_vis,
            tau,
            negatives: NegativeSet::BothFamilies,
        })
    }

    pub fn batch(&self) -> usize {
        self.point.shape()[0]
    }

    pub fn term(&self, term: ContrastTerm) -> Result<f64> {
        let mut g = Graph::inference(0);
        let codes = CodeVars {
            point: g.constant(self.point.clone()),
            image: g.constant(self.image.clone()),
            point_vis: g.constant(self.point_vis.clone()),
            image_vis: g.constant(self.image_vis.clone()),
        };
        let cfg = LossConfig {
            tau: self.tau,
            negatives: self.negatives,
            normalize_pixels: false,
        };
        let v = contrast_term(&mut g, &codes, term, &cfg)?;
        Ok(g.value(v).item())
    }

    pub fn full_full(&self) -> Result<f64> {
        self.term(ContrastTerm::FullFull)
    }

    pub fn full_masked(&self) -> Result<f64> {
        self.term(ContrastTerm::FullMasked)
    }

    pub fn masked_full(&self) -> Result<f64> {
        self.term(ContrastTerm::MaskedFull)
    }

    pub fn total(&self) -> Result<f64> {
        Ok(self.full_full()? + self.full_masked()? + self.masked_full()?)
    }
}
