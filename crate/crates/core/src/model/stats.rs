//! Analytic parameter and FLOP counts per model component.
//!
//! FLOPs count matrix products only (a multiply-add is 2 FLOPs) for one
//! sample with every token present: encoders see all `M` tokens plus the
//! class token, fusion blocks attend from all own tokens to all other
//! tokens, and decoders run and predict at every position.

use serde::Serialize;

use super::{CmahModel, ModelConfig};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComponentStats {
    pub component: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelStats {
    pub rows: Vec<ComponentStats>,
}

impl ModelStats {
    pub fn get(&self, component: &str) -> Option<&ComponentStats> {
        self.rows.iter().find(|r| r.component == component)
    }

    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }
}

fn linear(n: usize, i: usize, o: usize) -> u64 {
    2 * (n * i * o) as u64
}

fn self_attention(l: usize, d: usize) -> u64 {
    4 * linear(l, d, d) + 4 * (l * l * d) as u64
}

fn ffn(l: usize, d: usize, ratio: usize) -> u64 {
    linear(l, d, ratio * d) + linear(l, ratio * d, d)
}

fn block(l: usize, d: usize, ratio: usize) -> u64 {
    self_attention(l, d) + ffn(l, d, ratio)
}

fn fusion(c: &ModelConfig, own: (usize, usize), other: (usize, usize)) -> u64 {
    let df = c.fusion_width();
    let proj = |(m, w): (usize, usize)| if w != df { linear(m, w, df) } else { 0 };
    let cross = 2 * linear(own.0, df, df) + 2 * linear(other.0, df, df) + 4 * (own.0 * other.0 * df) as u64;
    proj(own) + proj(other) + self_attention(own.0, df) + self_attention(other.0, df) + cross + ffn(own.0, df, c.mlp_ratio)
}

/// Parameter and FLOP counts for the six model components; built from a
/// shape-only layout so large presets cost nothing to inspect.
pub fn model_stats(config: &ModelConfig) -> Result<ModelStats> {
    let model = CmahModel::layout(config.clone())?;
    let ps = &model.params;
    let c = config;
    let (mi, mp, k) = (c.image_tokens(), c.point_centers, c.group_size);
    let (di, dp, df) = (c.image_width, c.point_width, c.fusion_width());
    let [c1, c2, c3] = c.pointnet_widths;
    let hash = |d: usize| linear(1, d, d) + linear(1, d, c.code_bits);

    let image_encoder = linear(mi, c.patch_dim(), di) + c.image_depth as u64 * block(mi + 1, di, c.mlp_ratio) + hash(di);
    let point_encoder = linear(mp * k, 3, c1)
        + linear(mp * k, c1, c2)
        + linear(mp, c2, c3)
        + linear(mp, c3, dp)
        + linear(mp, 3, c.pos_hidden)
        + linear(mp, c.pos_hidden, dp)
        + c.point_depth as u64 * block(mp + 1, dp, c.mlp_ratio)
        + hash(dp);

    let fused = c.variant.uses_fusion();
    let recon = c.variant.uses_reconstruction();
    let (image_fusion, point_fusion) = if fused {
        (fusion(c, (mi, di), (mp, dp)), fusion(c, (mp, dp), (mi, di)))
    } else {
        (0, 0)
    };
    let (image_decoder, point_decoder) = if recon {
        let wi = if fused { df } else { di };
        let point_in = if fused { df } else { dp };
        let adapter = if point_in != dp { linear(mp, point_in, dp) } else { 0 };
        (
            c.image_decoder_depth as u64 * block(mi, wi, c.mlp_ratio) + linear(mi, wi, c.patch_dim()),
            adapter
                + linear(mp, 3, c.pos_hidden)
                + linear(mp, c.pos_hidden, dp)
                + c.point_decoder_depth as u64 * block(mp, dp, c.mlp_ratio)
                + linear(mp, dp, 3 * k),
        )
    } else {
        (0, 0)
    };

    let row = |name: &str, prefix: &str, flops: u64| ComponentStats {
        component: name.to_string(),
        params: ps.count_prefix(prefix),
        flops,
    };
    Ok(ModelStats {
        rows: vec![
            row("image encoder", "image.encoder.", image_encoder),
            row("image fusion", "image.fusion.", image_fusion),
            row("image decoder", "image.decoder.", image_decoder),
            row("point encoder", "point.encoder.", point_encoder),
            row("point fusion", "point.fusion.", point_fusion),
            row("point decoder", "point.decoder.", point_decoder),
        ],
    })
}
