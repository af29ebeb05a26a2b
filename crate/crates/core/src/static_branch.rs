//! Per-frame cross-modal transformer.
//!
//! Each sampled frame's `H·W` visual tokens are concatenated with the `L` text
//! tokens and encoded into a cross-modal memory; a single learnable object
//! query then repeatedly cross-attends to that memory. Frames never mix here:
//! every tensor carries the frame axis first and all ops act per frame.

use crate::config::ModelConfig;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{
    key_mask_bias, sine_encoding_2d, Ctx, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore,
};
use crate::tensor::Var;

/// Token features shared by both branches.
#[derive(Clone, Debug)]
pub struct TextFeatures {
    /// `[L, d]`
    pub tokens: Var,
    /// `false` marks padding slots, which are never attended to.
    pub mask: Vec<bool>,
}

impl TextFeatures {
    pub fn new(tokens: Var, mask: Vec<bool>) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 2 || s[0] != mask.len() || s[0] == 0 {
            return shape_err("TextFeatures", format!("tokens {:?} with mask of {}", s, mask.len()));
        }
        Ok(Self { tokens, mask })
    }
}

/// Encoder output for a batch of frames: `[F, H·W + L, d]`, visual rows first.
#[derive(Clone, Debug)]
pub struct CrossModalMemory {
    pub memory: Var,
    pub visual_len: usize,
    /// Self-attention weights of each encoder layer, `[F, heads, S, S]`.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ffn: FeedForward,
}

/// Output of one decoder layer for all frames.
#[derive(Clone, Debug)]
pub struct DecoderStep {
    /// Refined queries `[F, d]`.
    pub queries: Var,
    /// Head-averaged query-over-visual-memory weights, renormalized over `H·W`: `[F, H·W]`.
    pub cross_attention: Var,
    /// Raw cross-attention weights `[F, heads, 1, S]`.
    pub raw_attention: Var,
}

#[derive(Clone, Debug)]
pub struct StaticBranch {
    pub frame_proj: Linear,
    pub text_pos: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub query: ParamId,
    pub decoder: Vec<DecoderLayer>,
    grid: (usize, usize),
    d: usize,
}

impl StaticBranch {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let (d, eps) = (cfg.d_model, cfg.ln_eps);
        let encoder = (0..cfg.layers)
            .map(|i| {
                let p = format!("static.encoder.{i}");
                EncoderLayer {
                    norm: LayerNorm::new(store, &format!("{p}.norm"), d, eps),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.heads),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_ratio, eps),
                }
            })
            .collect();
        let decoder = (0..cfg.layers)
            .map(|i| {
                let p = format!("static.decoder.{i}");
                DecoderLayer {
                    norm: LayerNorm::new(store, &format!("{p}.norm"), d, eps),
                    cross: MultiHeadAttention::new(store, &format!("{p}.cross"), d, cfg.heads),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_ratio, eps),
                }
            })
            .collect();
        Self {
            frame_proj: Linear::new(store, "static.frame_proj", cfg.frame_channels, d),
            text_pos: store.add("static.text_pos", &[cfg.max_tokens, d], Init::Normal(0.1)),
            encoder,
            encoder_norm: LayerNorm::new(store, "static.encoder_norm", d, eps),
            query: store.add("static.query", &[d], Init::Normal(1.0)),
            decoder,
            grid: (cfg.grid_h, cfg.grid_w),
            d,
        }
    }

    pub fn layers(&self) -> usize {
        self.decoder.len()
    }

    /// Projects raw frame grids `[F, H, W, c]` to visual tokens `[F, H·W, d]`.
    pub fn project_frames(&self, ctx: &Ctx, frames: &Var) -> Result<Var> {
        let s = frames.shape();
        let (h, w) = self.grid;
        if s.len() != 4 || s[1] != h || s[2] != w {
            return shape_err("project_frames", format!("expected [F, {h}, {w}, c], got {:?}", s));
        }
        let x = frames.reshape(&[s[0], h * w, s[3]])?;
        self.frame_proj.forward(ctx, &x)
    }

    /// Encoder input `[F, H·W + L, d]`: visual tokens plus the 2-D sine encoding,
    /// then text tokens plus their per-slot learned encoding.
    pub fn encoder_input(&self, ctx: &Ctx, visual: &Var, text: &TextFeatures) -> Result<Var> {
        let vs = visual.shape();
        let (h, w) = self.grid;
        if vs.len() != 3 || vs[1] != h * w || vs[2] != self.d {
            return shape_err("encode_frame", format!("visual {:?}", vs));
        }
        if !text.mask.iter().any(|&m| m) {
            return invalid("text mask excludes every token");
        }
        let f = vs[0];
        let l = text.mask.len();
        let text_pos = ctx.p(self.text_pos);
        if text_pos.shape()[0] < l {
            return invalid(format!("{l} text tokens exceed {} positional slots", text_pos.shape()[0]));
        }
        let pe = ctx.constant(sine_encoding_2d(h, w, self.d));
        let vis = visual.add(&pe)?;
        let txt =
            text.tokens.add(&text_pos.narrow(0, 0, l)?)?.reshape(&[1, l, self.d])?.broadcast_to(&[f, l, self.d])?;
        ctx.tape().concat(&[vis, txt], 1)
    }

    /// Encoder: joint self-attention over visual and text tokens of each frame.
    pub fn encode(&self, ctx: &Ctx, visual: &Var, text: &TextFeatures) -> Result<CrossModalMemory> {
        let (h, w) = self.grid;
        let mut x = self.encoder_input(ctx, visual, text)?;
        let mut mask = vec![true; h * w];
        mask.extend_from_slice(&text.mask);
        let bias = key_mask_bias(ctx, &mask)?;
        let mut attention = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let n = layer.norm.forward(ctx, &x)?;
            let a = layer.attn.forward(ctx, &n, &n, &n, Some(&bias))?;
            x = layer.ffn.forward(ctx, &x.add(&a.output)?)?;
            attention.push(a.weights);
        }
        Ok(CrossModalMemory { memory: self.encoder_norm.forward(ctx, &x)?, visual_len: h * w, attention })
    }

    /// The learnable object query replicated for `frames` frames: `[F, d]`.
    pub fn initial_queries(&self, ctx: &Ctx, frames: usize) -> Result<Var> {
        ctx.p(self.query).reshape(&[1, self.d])?.broadcast_to(&[frames, self.d])
    }

    /// One decoder layer: queries `[F, d]` cross-attend to their own frame's memory.
    pub fn decode_layer(
        &self,
        ctx: &Ctx,
        layer: usize,
        queries: &Var,
        memory: &CrossModalMemory,
        text_mask: &[bool],
    ) -> Result<DecoderStep> {
        let dl = &self.decoder[layer];
        let f = queries.shape()[0];
        let ms = memory.memory.shape();
        if ms[0] != f || ms[1] != memory.visual_len + text_mask.len() {
            return shape_err("decode_object", format!("queries for {f} frames, memory {:?}", ms));
        }
        let mut mask = vec![true; memory.visual_len];
        mask.extend_from_slice(text_mask);
        let bias = key_mask_bias(ctx, &mask)?;
        let q = queries.reshape(&[f, 1, self.d])?;
        let n = dl.norm.forward(ctx, &q)?;
        let a = dl.cross.forward(ctx, &n, &memory.memory, &memory.memory, Some(&bias))?;
        let q = dl.ffn.forward(ctx, &q.add(&a.output)?)?.reshape(&[f, self.d])?;
        let cross_attention = visual_attention(&a.weights, memory.visual_len)?;
        Ok(DecoderStep { queries: q, cross_attention, raw_attention: a.weights })
    }

    /// Full static pass with no interaction: encoder, then all decoder layers.
    pub fn run(&self, ctx: &Ctx, frames: &Var, text: &TextFeatures) -> Result<StaticOutputs> {
        if frames.shape().first() == Some(&0) {
            return invalid("run_static needs at least one frame");
        }
        let visual = self.project_frames(ctx, frames)?;
        let memory = self.encode(ctx, &visual, text)?;
        let mut q = self.initial_queries(ctx, visual.shape()[0])?;
        let mut steps = Vec::with_capacity(self.decoder.len());
        for i in 0..self.decoder.len() {
            let step = self.decode_layer(ctx, i, &q, &memory, &text.mask)?;
            q = step.queries.clone();
            steps.push(step);
        }
        Ok(StaticOutputs { memory, steps })
    }
}

#[derive(Clone, Debug)]
pub struct StaticOutputs {
    pub memory: CrossModalMemory,
    pub steps: Vec<DecoderStep>,
}

/// Averages heads, keeps the visual columns and renormalizes: `[F, heads, 1, S]` → `[F, H·W]`.
pub fn visual_attention(weights: &Var, visual_len: usize) -> Result<Var> {
    let s = weights.shape();
    if s.len() != 4 || s[2] != 1 || s[3] < visual_len {
        return shape_err("visual_attention", format!("weights {:?}", s));
    }
    let avg = weights.mean_axes(&[1, 2], false)?.narrow(1, 0, visual_len)?;
    let total = avg.sum_axes(&[1], true)?;
    avg.div(&total)
}
