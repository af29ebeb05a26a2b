//! Space-time cross-modal transformer over clip volumes.
//!
//! Visual volumes are kept as `[T, H·W, d]` and text as `[L, d]`. A layer runs
//! divided space-time attention, text self-attention, bidirectional
//! cross-attention and a feed-forward block on both streams.

use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::interaction::StaticToDynamic;
use crate::nn::{
    key_mask_bias, sine_encoding, sine_encoding_2d, Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore,
};
use crate::tensor::{Tensor, Var};

/// Both streams after one layer.
#[derive(Clone, Debug)]
pub struct DynamicLayerState {
    /// `[T, H·W, d]`
    pub visual: Var,
    /// `[L, d]`
    pub text: Var,
    pub layer: usize,
    /// Every attention-weight tensor computed in this layer.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct CrossModalAttention {
    pub norm_v: LayerNorm,
    pub norm_l: LayerNorm,
    /// Visual queries attending to text.
    pub v2l: MultiHeadAttention,
    /// Text queries attending to the spatially pooled visual sequence.
    pub l2v: MultiHeadAttention,
}

#[derive(Clone, Debug)]
pub struct StcmtLayer {
    pub temporal_norm: LayerNorm,
    pub temporal: MultiHeadAttention,
    pub spatial_norm: LayerNorm,
    pub spatial: MultiHeadAttention,
    pub text_norm: LayerNorm,
    pub text: MultiHeadAttention,
    pub cross: CrossModalAttention,
    pub ffn_v: FeedForward,
    pub ffn_l: FeedForward,
}

/// Output of an attention sub-op: updated stream plus its weights.
pub type Attended = (Var, Var);

#[derive(Clone, Debug)]
pub struct DynamicBranch {
    pub clip_proj: Linear,
    pub layers: Vec<StcmtLayer>,
    grid: (usize, usize),
    d: usize,
}

impl DynamicBranch {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let (d, h, eps) = (cfg.d_model, cfg.heads, cfg.ln_eps);
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("dynamic.{i}");
                let ln = |s: &mut ParamStore, n: &str| LayerNorm::new(s, &format!("{p}.{n}"), d, eps);
                let mha = |s: &mut ParamStore, n: &str| MultiHeadAttention::new(s, &format!("{p}.{n}"), d, h);
                StcmtLayer {
                    temporal_norm: ln(store, "temporal_norm"),
                    temporal: mha(store, "temporal"),
                    spatial_norm: ln(store, "spatial_norm"),
                    spatial: mha(store, "spatial"),
                    text_norm: ln(store, "text_norm"),
                    text: mha(store, "text"),
                    cross: CrossModalAttention {
                        norm_v: ln(store, "cross.norm_v"),
                        norm_l: ln(store, "cross.norm_l"),
                        v2l: mha(store, "cross.v2l"),
                        l2v: mha(store, "cross.l2v"),
                    },
                    ffn_v: FeedForward::new(store, &format!("{p}.ffn_v"), d, cfg.ffn_ratio, eps),
                    ffn_l: FeedForward::new(store, &format!("{p}.ffn_l"), d, cfg.ffn_ratio, eps),
                }
            })
            .collect();
        Self {
            clip_proj: Linear::new(store, "dynamic.clip_proj", cfg.clip_channels, d),
            layers,
            grid: (cfg.grid_h, cfg.grid_w),
            d,
        }
    }

    /// Raw clip volumes `[T, H, W, c]` → `[T, H·W, d]` with temporal and spatial sine encodings added.
    pub fn project_clips(&self, ctx: &Ctx, clips: &Var) -> Result<Var> {
        let s = clips.shape();
        let (h, w) = self.grid;
        if s.len() != 4 || s[1] != h || s[2] != w || s[0] == 0 {
            return shape_err("project_clips", format!("expected [T, {h}, {w}, c], got {:?}", s));
        }
        let t = s[0];
        let x = self.clip_proj.forward(ctx, &clips.reshape(&[t, h * w, s[3]])?)?;
        let positions: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let tpe = ctx.constant(sine_encoding(&positions, self.d).reshaped(&[t, 1, self.d])?);
        let spe = ctx.constant(sine_encoding_2d(h, w, self.d).reshaped(&[1, h * w, self.d])?);
        x.add(&tpe)?.add(&spe)
    }

    fn check_visual(&self, op: &'static str, fv: &Var) -> Result<(usize, usize)> {
        let s = fv.shape();
        if s.len() != 3 || s[1] != self.grid.0 * self.grid.1 || s[2] != self.d {
            return shape_err(op, format!("visual stream {:?}", s));
        }
        Ok((s[0], s[1]))
    }

    /// Each spatial site attends over its `T` time steps.
    pub fn temporal_attention(&self, ctx: &Ctx, layer: usize, fv: &Var) -> Result<Attended> {
        self.check_visual("temporal_attention", fv)?;
        let l = &self.layers[layer];
        let x = fv.permute(&[1, 0, 2])?;
        let n = l.temporal_norm.forward(ctx, &x)?;
        let a = l.temporal.forward(ctx, &n, &n, &n, None)?;
        Ok((x.add(&a.output)?.permute(&[1, 0, 2])?, a.weights))
    }

    /// Each time step attends over its `H·W` sites.
    pub fn spatial_attention(&self, ctx: &Ctx, layer: usize, fv: &Var) -> Result<Attended> {
        self.check_visual("spatial_attention", fv)?;
        let l = &self.layers[layer];
        let n = l.spatial_norm.forward(ctx, fv)?;
        let a = l.spatial.forward(ctx, &n, &n, &n, None)?;
        Ok((fv.add(&a.output)?, a.weights))
    }

    /// Temporal then spatial attention, each residual.
    pub fn divided_self_attention(&self, ctx: &Ctx, layer: usize, fv: &Var) -> Result<(Var, Vec<Var>)> {
        let (x, wt) = self.temporal_attention(ctx, layer, fv)?;
        let (x, ws) = self.spatial_attention(ctx, layer, &x)?;
        Ok((x, vec![wt, ws]))
    }

    pub fn text_self_attention(&self, ctx: &Ctx, layer: usize, fl: &Var, mask: &[bool]) -> Result<Attended> {
        let s = fl.shape();
        if s.len() != 2 || s[0] != mask.len() || s[1] != self.d {
            return shape_err("text_self_attention", format!("text {:?} with mask of {}", s, mask.len()));
        }
        let l = &self.layers[layer];
        let bias = key_mask_bias(ctx, mask)?;
        let x = fl.reshape(&[1, s[0], s[1]])?;
        let n = l.text_norm.forward(ctx, &x)?;
        let a = l.text.forward(ctx, &n, &n, &n, Some(&bias))?;
        Ok((x.add(&a.output)?.reshape(&s)?, a.weights))
    }

    /// Bidirectional cross-attention. Visual queries run per spatial site over
    /// their `T` steps against the text; text queries attend to the visual
    /// stream mean-pooled over space.
    pub fn cross_attention(
        &self,
        ctx: &Ctx,
        layer: usize,
        fv: &Var,
        fl: &Var,
        mask: &[bool],
    ) -> Result<(Var, Var, Vec<Var>)> {
        let (t, hw) = self.check_visual("cross_attention", fv)?;
        let ls = fl.shape();
        if ls.len() != 2 || ls[0] != mask.len() || ls[1] != self.d {
            return shape_err("cross_attention", format!("text {:?} with mask of {}", ls, mask.len()));
        }
        let (l, d) = (ls[0], self.d);
        let c = &self.layers[layer].cross;
        let hv = c.norm_v.forward(ctx, fv)?;
        let hl = c.norm_l.forward(ctx, fl)?;

        let bias = key_mask_bias(ctx, mask)?;
        let q = hv.permute(&[1, 0, 2])?;
        let kl = hl.reshape(&[1, l, d])?.broadcast_to(&[hw, l, d])?;
        let v2l = c.v2l.forward(ctx, &q, &kl, &kl, Some(&bias))?;
        let fv2 = fv.add(&v2l.output.permute(&[1, 0, 2])?)?;

        let pooled = hv.mean_axes(&[1], false)?.reshape(&[1, t, d])?;
        let ql = hl.reshape(&[1, l, d])?;
        let l2v = c.l2v.forward(ctx, &ql, &pooled, &pooled, None)?;
        let fl2 = fl.add(&l2v.output.reshape(&[l, d])?)?;
        Ok((fv2, fl2, vec![v2l.weights, l2v.weights]))
    }

    /// One full layer without any interaction.
    pub fn layer(&self, ctx: &Ctx, layer: usize, fv: &Var, fl: &Var, mask: &[bool]) -> Result<DynamicLayerState> {
        let (v, mut attention) = self.divided_self_attention(ctx, layer, fv)?;
        let (l, wl) = self.text_self_attention(ctx, layer, fl, mask)?;
        attention.push(wl);
        let (v, l, wc) = self.cross_attention(ctx, layer, &v, &l, mask)?;
        attention.extend(wc);
        let lay = &self.layers[layer];
        Ok(DynamicLayerState {
            visual: lay.ffn_v.forward(ctx, &v)?,
            text: lay.ffn_l.forward(ctx, &l)?,
            layer,
            attention,
        })
    }

    /// Runs all layers. With `sdib`, layer `i`'s visual output is gated by
    /// `gates[i]` (`[T, H·W]`) through `blocks[i]`.
    pub fn forward(
        &self,
        ctx: &Ctx,
        clips: &Var,
        text: &Var,
        mask: &[bool],
        sdib: Option<(&[Var], &[StaticToDynamic])>,
    ) -> Result<Vec<DynamicLayerState>> {
        let mut fv = self.project_clips(ctx, clips)?;
        let t = fv.shape()[0];
        if let Some((gates, blocks)) = sdib {
            if gates.len() != self.layers.len() || blocks.len() != self.layers.len() {
                return shape_err(
                    "stcmt_forward",
                    format!("{} gate maps and {} blocks for {} layers", gates.len(), blocks.len(), self.layers.len()),
                );
            }
            for g in gates {
                if g.shape() != [t, self.grid.0 * self.grid.1] {
                    return shape_err("stcmt_forward", format!("gate map {:?} for {t} clips", g.shape()));
                }
            }
        }
        let mut fl = text.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let mut st = self.layer(ctx, i, &fv, &fl, mask)?;
            if let Some((gates, blocks)) = sdib {
                st.visual = blocks[i].forward(ctx, &st.visual, &gates[i])?;
            }
            fv = st.visual.clone();
            fl = st.text.clone();
            out.push(st);
        }
        Ok(out)
    }
}

/// Spatial mean of a visual stream: `[T, H·W, d]` → `[T, d]`.
pub fn spatial_mean(fv: &Var) -> Result<Var> {
    fv.mean_axes(&[1], false)
}

/// Fixed temporal encoding of frame or clip positions.
pub fn temporal_encoding(positions: &[f64], d: usize) -> Tensor {
    sine_encoding(positions, d)
}
