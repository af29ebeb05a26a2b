//! Exchange between the branches at each depth.
//!
//! Static to dynamic: the decoder's spatial attention gates the clip features.
//! Dynamic to static: each frame's query reads the clip it falls in, then the
//! queries of all sampled frames attend to each other over time.

use crate::config::ModelConfig;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{sine_encoding, Ctx, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct StaticToDynamic {
    pub fc: Linear,
    pub norm: LayerNorm,
}

impl StaticToDynamic {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Self {
        Self {
            fc: Linear::new(store, &format!("{name}.fc"), cfg.d_model, cfg.d_model),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d_model, cfg.ln_eps),
        }
    }

    /// `LayerNorm(F + A ⊙ FC(F))` with `A` (`[T, H·W]`) broadcast over channels.
    pub fn forward(&self, ctx: &Ctx, fv: &Var, gate: &Var) -> Result<Var> {
        let s = fv.shape();
        let g = gate.shape();
        if s.len() != 3 || g.len() != 2 || g[0] != s[0] || g[1] != s[1] {
            return shape_err("static_to_dynamic", format!("features {:?}, gate {:?}", s, g));
        }
        let gate = gate.reshape(&[s[0], s[1], 1])?;
        let gated = gate.mul(&self.fc.forward(ctx, fv)?)?;
        self.norm.forward(ctx, &fv.add(&gated)?)
    }
}

/// Free-function form of [`StaticToDynamic::forward`].
pub fn static_to_dynamic(ctx: &Ctx, fv: &Var, gate: &Var, block: &StaticToDynamic) -> Result<Var> {
    block.forward(ctx, fv, gate)
}

#[derive(Clone, Debug)]
pub struct DynamicToStatic {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub cross: MultiHeadAttention,
    pub norm_t: LayerNorm,
    pub temporal: MultiHeadAttention,
    d: usize,
}

/// Output of the dynamic-to-static block.
#[derive(Clone, Debug)]
pub struct Enriched {
    /// `[F, d]`
    pub queries: Var,
    /// Cross-attention weights `[F, heads, 1, H·W]`.
    pub cross_weights: Var,
    /// Temporal self-attention weights `[1, heads, F, F]`.
    pub temporal_weights: Var,
}

impl DynamicToStatic {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Self {
        let (d, h, eps) = (cfg.d_model, cfg.heads, cfg.ln_eps);
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), d, eps),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), d, eps),
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), d, h),
            norm_t: LayerNorm::new(store, &format!("{name}.norm_t"), d, eps),
            temporal: MultiHeadAttention::new(store, &format!("{name}.temporal"), d, h),
            d,
        }
    }

    /// `queries` is `[F, d]`, `fv` is `[T, H·W, d]`; `frame_to_clip[f]` names the
    /// clip frame `f` reads and `positions[f]` its temporal position.
    pub fn forward(
        &self,
        ctx: &Ctx,
        queries: &Var,
        fv: &Var,
        frame_to_clip: &[usize],
        positions: &[f64],
    ) -> Result<Enriched> {
        let qs = queries.shape();
        let vs = fv.shape();
        if qs.len() != 2 || qs[1] != self.d || vs.len() != 3 || vs[2] != self.d {
            return shape_err("dynamic_to_static", format!("queries {:?}, features {:?}", qs, vs));
        }
        let f = qs[0];
        if frame_to_clip.len() != f || positions.len() != f {
            return invalid(format!(
                "{f} queries but {} clip indices and {} positions",
                frame_to_clip.len(),
                positions.len()
            ));
        }
        if let Some(&c) = frame_to_clip.iter().find(|&&c| c >= vs[0]) {
            return invalid(format!("frame mapped to clip {c} of {}", vs[0]));
        }
        let kv = self.norm_kv.forward(ctx, &fv.index_select(frame_to_clip)?)?;
        let q = queries.reshape(&[f, 1, self.d])?;
        let n = self.norm_q.forward(ctx, &q)?;
        let a = self.cross.forward(ctx, &n, &kv, &kv, None)?;
        let q1 = q.add(&a.output)?.reshape(&[1, f, self.d])?;

        let pe = ctx.constant(sine_encoding(positions, self.d).reshaped(&[1, f, self.d])?);
        let n = self.norm_t.forward(ctx, &q1)?.add(&pe)?;
        let t = self.temporal.forward(ctx, &n, &n, &n, None)?;
        Ok(Enriched {
            queries: q1.add(&t.output)?.reshape(&[f, self.d])?,
            cross_weights: a.weights,
            temporal_weights: t.weights,
        })
    }
}

/// Free-function form of [`DynamicToStatic::forward`].
pub fn dynamic_to_static(
    ctx: &Ctx,
    queries: &Var,
    fv: &Var,
    block: &DynamicToStatic,
    frame_to_clip: &[usize],
    positions: &[f64],
) -> Result<Enriched> {
    block.forward(ctx, queries, fv, frame_to_clip, positions)
}

/// `t ↦ floor(t·T / T_f)` for `t` in `0..T_f`.
pub fn frame_clip_alignment(frames: usize, clips: usize) -> Vec<usize> {
    if frames == 0 {
        return Vec::new();
    }
    (0..frames).map(|t| t * clips / frames).collect()
}

/// Row-stochastic `[T, F]` matrix turning per-frame maps into per-clip maps.
///
/// A clip averages the frames mapped to it; a clip with no sampled frame
/// copies the frame whose clip is nearest (earliest on ties).
pub fn frame_to_clip_pooling(frame_to_clip: &[usize], clips: usize) -> Result<Tensor> {
    let f = frame_to_clip.len();
    if f == 0 || clips == 0 {
        return invalid("frame_to_clip_pooling needs at least one frame and one clip");
    }
    if let Some(&c) = frame_to_clip.iter().find(|&&c| c >= clips) {
        return invalid(format!("frame mapped to clip {c} of {clips}"));
    }
    let mut p = vec![0.0; clips * f];
    for c in 0..clips {
        let members: Vec<usize> = (0..f).filter(|&i| frame_to_clip[i] == c).collect();
        if members.is_empty() {
            let nearest = (0..f).min_by_key(|&i| frame_to_clip[i].abs_diff(c)).unwrap_or(0);
            p[c * f + nearest] = 1.0;
        } else {
            for &i in &members {
                p[c * f + i] = 1.0 / members.len() as f64;
            }
        }
    }
    Tensor::new(&[clips, f], p)
}

/// Per-frame gate maps `[F, H·W]` → per-clip gate maps `[T, H·W]`.
pub fn frame_gates_to_clips(ctx: &Ctx, gates: &Var, frame_to_clip: &[usize], clips: usize) -> Result<Var> {
    let p = ctx.constant(frame_to_clip_pooling(frame_to_clip, clips)?);
    p.matmul(gates)
}
