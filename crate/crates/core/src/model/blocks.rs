use crate::diffcore::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, INIT_STD};
use crate::tokenizer::{MaskRecord, Stage, TokenSet};

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), width),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), width, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), width),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), width, width * mlp_ratio),
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, ps, x)?;
        let h = self.attn.forward(g, ps, h, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, ps, x)?;
        let h = self.ffn.forward(g, ps, h)?;
        g.add(x, h)
    }
}

/// A stack of blocks followed by a final layer norm (omitted at depth 0 so
/// the empty stack is the identity).
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub norm: Option<LayerNorm>,
    pub width: usize,
}

impl TransformerStack {
    pub fn new(ps: &mut ParamStore, name: &str, depth: usize, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(ps, &format!("{name}.blocks.{i}"), width, heads, mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = (depth > 0).then(|| LayerNorm::new(ps, &format!("{name}.norm"), width));
        Ok(Self { blocks, norm, width })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, mut x: Var) -> Result<Var> {
        let w = g.shape(x).last().copied();
        if w != Some(self.width) {
            return Err(Error::shape("transformer stack", g.shape(x), &[self.width]));
        }
        for b in &self.blocks {
            x = b.forward(g, ps, x)?;
        }
        match &self.norm {
            Some(n) => n.forward(g, ps, x),
            None => Ok(x),
        }
    }
}

/// Two fully-connected layers, ReLU between, tanh on the output.
#[derive(Clone, Debug)]
pub struct HashHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl HashHead {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, hidden: usize, bits: usize) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), width, hidden),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, bits),
        }
    }

    /// `cls: [B, width]` → continuous codes `[B, bits]` in `(-1, 1)`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, cls: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, cls)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, ps, h)?;
        Ok(g.tanh(h))
    }
}

/// Class token, transformer stack and hash head shared by both encoders.
#[derive(Clone, Debug)]
pub struct EncoderCore {
    pub cls: ParamId,
    pub stack: TransformerStack,
    pub hash: HashHead,
}

/// Encoded tokens with the class embedding split off.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub tokens: TokenSet,
    pub cls: Var,
}

impl EncoderCore {
    pub fn new(ps: &mut ParamStore, name: &str, depth: usize, width: usize, heads: usize, mlp_ratio: usize, bits: usize) -> Result<Self> {
        Ok(Self {
            cls: ps.register(format!("{name}.cls"), &[1, width], Init::Zeros, false),
            stack: TransformerStack::new(ps, name, depth, width, heads, mlp_ratio)?,
            hash: HashHead::new(ps, &format!("{name}.hash"), width, width, bits),
        })
    }

    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, ts: &TokenSet) -> Result<Encoded> {
        ts.expect_stage(Stage::Raw)?;
        if ts.width != self.stack.width {
            return Err(Error::shape("encode", &[ts.width], &[self.stack.width]));
        }
        let table = g.param(ps, self.cls)?;
        let cls = g.embedding(table, &vec![0; ts.batch])?;
        let cls = g.reshape(cls, &[ts.batch, 1, ts.width])?;
        let x = g.concat(&[cls, ts.var], 1)?;
        let x = self.stack.forward(g, ps, x)?;
        let cls = g.slice(x, 1, 0, 1)?;
        let cls = g.reshape(cls, &[ts.batch, ts.width])?;
        let tokens = g.slice(x, 1, 1, ts.len + 1)?;
        Ok(Encoded {
            tokens: TokenSet {
                var: tokens,
                stage: Stage::Encoded,
                ..*ts
            },
            cls,
        })
    }
}

/// Self-attention (weights shared between the query side and the key/value
/// side), cross-attention from own tokens into the other modality, then a
/// feed-forward layer.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub own_proj: Option<Linear>,
    pub other_proj: Option<Linear>,
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub query_norm: LayerNorm,
    pub kv_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub width: usize,
}

impl FusionBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        own_width: usize,
        other_width: usize,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let proj = |ps: &mut ParamStore, tag: &str, w: usize| (w != width).then(|| Linear::new(ps, &format!("{name}.{tag}"), w, width));
        Ok(Self {
            own_proj: proj(ps, "own_proj", own_width),
            other_proj: proj(ps, "other_proj", other_width),
            self_norm: LayerNorm::new(ps, &format!("{name}.self_norm"), width),
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), width, heads)?,
            query_norm: LayerNorm::new(ps, &format!("{name}.query_norm"), width),
            kv_norm: LayerNorm::new(ps, &format!("{name}.kv_norm"), width),
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), width, heads)?,
            ffn_norm: LayerNorm::new(ps, &format!("{name}.ffn_norm"), width),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), width, width * mlp_ratio),
            width,
        })
    }

    fn self_attend(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.self_norm.forward(g, ps, x)?;
        let h = self.self_attn.forward(g, ps, h, h)?;
        g.add(x, h)
    }

    /// `own`: visible encoded tokens; `other`: the other modality's full
    /// encoded tokens. Output has `own.len` tokens of the fusion width.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, own: &TokenSet, other: &TokenSet) -> Result<TokenSet> {
        own.expect_stage(Stage::Encoded)?;
        other.expect_stage(Stage::Encoded)?;
        if own.modality == other.modality || own.batch != other.batch {
            return Err(Error::invalid("fusion needs same-size batches of two different modalities"));
        }
        let q = match &self.own_proj {
            Some(p) => p.forward(g, ps, own.var)?,
            None => own.var,
        };
        let kv = match &self.other_proj {
            Some(p) => p.forward(g, ps, other.var)?,
            None => other.var,
        };
        let q = self.self_attend(g, ps, q)?;
        let kv = self.self_attend(g, ps, kv)?;
        let qn = self.query_norm.forward(g, ps, q)?;
        let kvn = self.kv_norm.forward(g, ps, kv)?;
        let c = self.cross_attn.forward(g, ps, qn, kvn)?;
        let x = g.add(q, c)?;
        let h = self.ffn_norm.forward(g, ps, x)?;
        let h = self.ffn.forward(g, ps, h)?;
        let x = g.add(x, h)?;
        Ok(TokenSet {
            var: x,
            width: self.width,
            stage: Stage::Fused,
            ..*own
        })
    }
}

/// Decoder positional embedding: a learnable table or an MLP over centers.
#[derive(Clone, Debug)]
pub enum DecoderPosition {
    Table(ParamId),
    Mlp(Linear, Linear),
}

/// Mask-token insertion, transformer stack and reconstruction head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub adapter: Option<Linear>,
    pub mask_token: ParamId,
    pub position: DecoderPosition,
    pub stack: TransformerStack,
    pub head: Linear,
    pub width: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input_width: Option<usize>,
        width: usize,
        tokens: usize,
        table_position: bool,
        pos_hidden: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let adapter = input_width
            .filter(|&w| w != width)
            .map(|w| Linear::new(ps, &format!("{name}.adapter"), w, width));
        let mask_token = ps.register(format!("{name}.mask_token"), &[1, width], Init::TruncNormal(INIT_STD), false);
        let position = if table_position {
            DecoderPosition::Table(ps.register(format!("{name}.pos"), &[tokens, width], Init::TruncNormal(INIT_STD), false))
        } else {
            DecoderPosition::Mlp(
                Linear::new(ps, &format!("{name}.pos1"), 3, pos_hidden),
                Linear::new(ps, &format!("{name}.pos2"), pos_hidden, width),
            )
        };
        Ok(Self {
            adapter,
            mask_token,
            position,
            stack: TransformerStack::new(ps, name, depth, width, heads, mlp_ratio)?,
            head: Linear::new(ps, &format!("{name}.head"), width, out_dim),
            width,
        })
    }

    /// Reconstruct the masked tokens of `record`.
    ///
    /// `vis` holds the visible tokens (fused, or encoded when fusion is
    /// off); `centers: [B, M, 3]` feeds the MLP positional embedding.
    /// Returns `[B · M_mask, out_dim]` in the record's target order.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, vis: &TokenSet, record: &MaskRecord, centers: Option<Var>) -> Result<Var> {
        if !matches!(vis.stage, Stage::Fused | Stage::Encoded) {
            return Err(Error::invalid(format!("decoder input at stage {:?}", vis.stage)));
        }
        if record.batch() != vis.batch || record.visible_per_sample() != vis.len {
            return Err(Error::invalid(format!(
                "mask record ({} samples, {} visible) does not match {} samples of {} tokens",
                record.batch(),
                record.visible_per_sample(),
                vis.batch,
                vis.len
            )));
        }
        let (b, m, n_mask) = (vis.batch, record.tokens(), record.masked_per_sample());
        if n_mask == 0 {
            return Err(Error::invalid("decoder called with no masked tokens"));
        }
        let x = match &self.adapter {
            Some(a) => a.forward(g, ps, vis.var)?,
            None => vis.var,
        };
        if g.shape(x).last() != Some(&self.width) {
            return Err(Error::shape("decoder input", g.shape(x), &[self.width]));
        }
        let flat = g.reshape(x, &[b * vis.len, self.width])?;
        let mask = g.param(ps, self.mask_token)?;
        let table = g.concat(&[flat, mask], 0)?;
        let mask_row = b * vis.len;
        let mut order = vec![mask_row; b * m];
        for (s, p) in record.patterns.iter().enumerate() {
            for (r, &j) in p.visible.iter().enumerate() {
                order[s * m + j] = s * vis.len + r;
            }
        }
        let x = g.embedding(table, &order)?;
        let x = g.reshape(x, &[b, m, self.width])?;
        let pos = match &self.position {
            DecoderPosition::Table(id) => g.param(ps, *id)?,
            DecoderPosition::Mlp(l1, l2) => {
                let c = centers.ok_or_else(|| Error::invalid("point decoder needs group centers"))?;
                let h = l1.forward(g, ps, c)?;
                let h = g.gelu(h);
                l2.forward(g, ps, h)?
            }
        };
        let x = g.add(x, pos)?;
        let x = self.stack.forward(g, ps, x)?;
        let flat = g.reshape(x, &[b * m, self.width])?;
        let rows: Vec<usize> = record
            .patterns
            .iter()
            .enumerate()
            .flat_map(|(s, p)| p.masked.iter().map(move |&j| s * m + j))
            .collect();
        let x = g.embedding(flat, &rows)?;
        self.head.forward(g, ps, x)
    }
}
