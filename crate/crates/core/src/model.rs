//! The full two-branch model and its per-depth schedule.

use crate::config::ModelConfig;
use crate::dynamic_branch::{DynamicBranch, DynamicLayerState};
use crate::error::{invalid, Result};
use crate::heads::{self, Heads};
use crate::interaction::{frame_clip_alignment, frame_gates_to_clips, DynamicToStatic, StaticToDynamic};
use crate::nn::{Ctx, Embedding, ParamStore};
use crate::static_branch::{StaticBranch, TextFeatures};
use crate::synth_data::{embed_tokens, GroundingSample};
use crate::tensor::{Tensor, Var};

/// One forward pass worth of inputs.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// Sampled frame grids `[F, H, W, c_f]`.
    pub frames: Tensor,
    /// Video frame index of each sampled frame.
    pub frame_indices: Vec<usize>,
    pub video_frames: usize,
    /// `[T, H, W, c_c]`
    pub clips: Tensor,
    pub tokens: Vec<usize>,
    pub token_mask: Vec<bool>,
}

impl ModelInput {
    pub fn from_sample(sample: &GroundingSample, frame_indices: &[usize]) -> Result<Self> {
        let tf = sample.video_frames();
        if frame_indices.is_empty() {
            return invalid("no frames sampled");
        }
        if let Some(&f) = frame_indices.iter().find(|&&f| f >= tf) {
            return invalid(format!("frame {f} outside a {tf}-frame video"));
        }
        let s = sample.frames.shape();
        let inner: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(frame_indices.len() * inner);
        for &f in frame_indices {
            data.extend_from_slice(&sample.frames.data()[f * inner..(f + 1) * inner]);
        }
        Ok(Self {
            frames: Tensor::new(&[frame_indices.len(), s[1], s[2], s[3]], data)?,
            frame_indices: frame_indices.to_vec(),
            video_frames: tf,
            clips: sample.clips.clone(),
            tokens: sample.tokens.clone(),
            token_mask: sample.token_mask.clone(),
        })
    }

    /// Clip index of each sampled frame.
    pub fn frame_to_clip(&self) -> Vec<usize> {
        let map = frame_clip_alignment(self.video_frames, self.clips.shape()[0]);
        self.frame_indices.iter().map(|&f| map[f]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[F, 4]`
    pub boxes: Var,
    /// `[F]`
    pub frame_scores: Var,
    /// `[T, T]`
    pub score_map: Var,
    /// `[T]`
    pub clip_scores: Var,
    /// `F_d`, `[T, d_m]`
    pub moment_features: Var,
    /// `[T, T, d_m]`
    pub proposal_map: Var,
    /// Query state after each depth, `[F, d]`.
    pub queries: Vec<Var>,
    /// Decoder spatial attention at each depth, `[F, H·W]`.
    pub cross_attention: Vec<Var>,
    pub dynamic: Vec<DynamicLayerState>,
    /// Every attention-weight tensor computed in the pass.
    pub attention: Vec<Var>,
}

impl ForwardOutput {
    pub fn loss_inputs(&self) -> crate::losses::LossInputs {
        crate::losses::LossInputs {
            boxes: self.boxes.clone(),
            frame_scores: self.frame_scores.clone(),
            score_map: self.score_map.clone(),
            clip_scores: self.clip_scores.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroundingModel {
    cfg: ModelConfig,
    params: ParamStore,
    pub embed: Embedding,
    pub static_branch: StaticBranch,
    pub dynamic_branch: DynamicBranch,
    pub s2d: Vec<StaticToDynamic>,
    pub d2s: Vec<DynamicToStatic>,
    pub heads: Heads,
}

impl GroundingModel {
    /// Every block's parameters exist regardless of the interaction flags.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new(seed);
        let embed = Embedding::new(&mut p, "text.embed", cfg.vocab_size, cfg.d_model);
        let static_branch = StaticBranch::new(&mut p, &cfg);
        let dynamic_branch = DynamicBranch::new(&mut p, &cfg);
        let s2d =
            (0..cfg.layers).map(|i| StaticToDynamic::new(&mut p, &format!("interaction.{i}.s2d"), &cfg)).collect();
        let d2s =
            (0..cfg.layers).map(|i| DynamicToStatic::new(&mut p, &format!("interaction.{i}.d2s"), &cfg)).collect();
        let heads = Heads::new(&mut p, &cfg);
        Ok(Self { cfg, params: p, embed, static_branch, dynamic_branch, s2d, d2s, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_interaction(&mut self, s2d: bool, d2s: bool) {
        self.cfg.s2d = s2d;
        self.cfg.d2s = d2s;
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let c = &self.cfg;
        let fs = input.frames.shape();
        let cs = input.clips.shape();
        let ok = fs.len() == 4
            && fs[0] == input.frame_indices.len()
            && fs[1..] == [c.grid_h, c.grid_w, c.frame_channels]
            && cs == [c.clips, c.grid_h, c.grid_w, c.clip_channels]
            && input.tokens.len() == input.token_mask.len()
            && input.tokens.len() <= c.max_tokens
            && input.frame_indices.iter().all(|&f| f < input.video_frames);
        if !ok {
            return invalid(format!(
                "input frames {:?}, clips {:?}, {} tokens do not fit the model",
                fs,
                cs,
                input.tokens.len()
            ));
        }
        Ok(())
    }

    /// Runs both branches depth by depth: static decoder layer, dynamic layer
    /// gated by that layer's spatial attention, then query enrichment from the
    /// gated clip features.
    pub fn forward(&self, ctx: &Ctx, input: &ModelInput) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let c = &self.cfg;
        let text: TextFeatures = embed_tokens(ctx, &self.embed, &input.tokens, &input.token_mask)?;
        let mask = &text.mask;

        let frames = ctx.constant(input.frames.clone());
        let visual = self.static_branch.project_frames(ctx, &frames)?;
        let memory = self.static_branch.encode(ctx, &visual, &text)?;
        let mut attention = memory.attention.clone();
        let f = input.frame_indices.len();
        let mut q = self.static_branch.initial_queries(ctx, f)?;

        let clips = ctx.constant(input.clips.clone());
        let mut fv = self.dynamic_branch.project_clips(ctx, &clips)?;
        let mut fl = text.tokens.clone();

        let frame_to_clip = input.frame_to_clip();
        let positions: Vec<f64> = input.frame_indices.iter().map(|&i| i as f64).collect();

        let mut queries = Vec::with_capacity(c.layers);
        let mut cross_attention = Vec::with_capacity(c.layers);
        let mut dynamic = Vec::with_capacity(c.layers);
        for i in 0..c.layers {
            let step = self.static_branch.decode_layer(ctx, i, &q, &memory, mask)?;
            attention.push(step.raw_attention.clone());
            q = step.queries;

            let mut st = self.dynamic_branch.layer(ctx, i, &fv, &fl, mask)?;
            attention.extend(st.attention.iter().cloned());
            if c.s2d {
                let gate = frame_gates_to_clips(ctx, &step.cross_attention, &frame_to_clip, c.clips)?;
                st.visual = self.s2d[i].forward(ctx, &st.visual, &gate)?;
            }
            fv = st.visual.clone();
            fl = st.text.clone();

            if c.d2s {
                let e = self.d2s[i].forward(ctx, &q, &fv, &frame_to_clip, &positions)?;
                attention.push(e.cross_weights);
                attention.push(e.temporal_weights);
                q = e.queries;
            }
            queries.push(q.clone());
            cross_attention.push(step.cross_attention);
            dynamic.push(st);
        }

        let boxes = heads::predict_bbox(ctx, &self.heads, &q)?;
        let frame_scores = heads::predict_frame_score(ctx, &self.heads, &q)?;
        let moment_features = heads::moment_features(ctx, &self.heads, &fv)?;
        let proposal_map = heads::build_proposal_map(ctx, &moment_features)?;
        let score_map = heads::score_proposals(ctx, &self.heads, &proposal_map)?;
        let clip_scores = heads::aux_clip_scores(ctx, &self.heads, &moment_features)?;
        Ok(ForwardOutput {
            boxes,
            frame_scores,
            score_map,
            clip_scores,
            moment_features,
            proposal_map,
            queries,
            cross_attention,
            dynamic,
            attention,
        })
    }
}
