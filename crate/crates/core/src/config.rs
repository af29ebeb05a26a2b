//! Model, generator and training configuration, plus the flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters and data geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Depth N of both branches.
    pub layers: usize,
    pub d_model: usize,
    /// Channel width of the temporal proposal map.
    pub d_moment: usize,
    /// Number of clips T seen by the dynamic branch.
    pub clips: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Token slots L.
    pub max_tokens: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// Hidden 3x3 convolutions in the proposal scorer.
    pub conv_layers: usize,
    pub vocab_size: usize,
    pub frame_channels: usize,
    pub clip_channels: usize,
    pub ln_eps: f64,
    /// Static-to-dynamic gating enabled.
    pub s2d: bool,
    /// Dynamic-to-static query enrichment enabled.
    pub d2s: bool,
}

impl ModelConfig {
    pub fn toy() -> Self {
        GenConfig::default().model_config(&ArchConfig::default())
    }

    pub fn grid_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_moment", self.d_moment),
            ("clips", self.clips),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("max_tokens", self.max_tokens),
            ("heads", self.heads),
            ("ffn_ratio", self.ffn_ratio),
            ("vocab_size", self.vocab_size),
            ("frame_channels", self.frame_channels),
            ("clip_channels", self.clip_channels),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config("d_model must be a multiple of 4 (2-D sine encoding)".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Architecture keys that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_moment: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub conv_layers: usize,
    pub ln_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { layers: 2, d_model: 32, d_moment: 16, heads: 2, ffn_ratio: 4, conv_layers: 2, ln_eps: 1e-5 }
    }
}

/// Which cue separates the target from its distractors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Distractors carry a different appearance attribute.
    Attribute,
    /// Distractors share the target's attribute and differ only in what they do and when.
    Action,
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attribute" => Ok(Regime::Attribute),
            "action" => Ok(Regime::Action),
            _ => Err(Error::Config(format!("unknown regime {s:?}"))),
        }
    }
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Attribute => "attribute",
            Regime::Action => "action",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub video_frames: usize,
    pub clips: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub max_tokens: usize,
    pub attributes: usize,
    pub actions: usize,
    pub distractors: usize,
    pub regime: Regime,
    pub min_box: f64,
    pub max_box: f64,
    pub min_span_clips: usize,
    pub max_span_clips: usize,
    /// Per-frame displacement bound in normalized units.
    pub max_speed: f64,
    pub seed: u64,
    pub samples: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            video_frames: 16,
            clips: 8,
            grid_h: 4,
            grid_w: 4,
            max_tokens: 6,
            attributes: 4,
            actions: 4,
            distractors: 1,
            regime: Regime::Attribute,
            min_box: 0.15,
            max_box: 0.3,
            min_span_clips: 2,
            max_span_clips: 5,
            max_speed: 0.02,
            seed: 0,
            samples: 16,
        }
    }
}

impl GenConfig {
    pub fn frames_per_clip(&self) -> usize {
        self.video_frames / self.clips.max(1)
    }

    /// Raw frame channels: attribute one-hot, coverage, box (cx, cy, w, h).
    pub fn frame_channels(&self) -> usize {
        self.attributes + 5
    }

    /// Raw clip channels: attribute one-hot, coverage, action one-hot.
    pub fn clip_channels(&self) -> usize {
        self.attributes + 1 + self.actions
    }

    pub fn model_config(&self, arch: &ArchConfig) -> ModelConfig {
        ModelConfig {
            layers: arch.layers,
            d_model: arch.d_model,
            d_moment: arch.d_moment,
            clips: self.clips,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            max_tokens: self.max_tokens,
            heads: arch.heads,
            ffn_ratio: arch.ffn_ratio,
            conv_layers: arch.conv_layers,
            vocab_size: crate::synth_data::Vocab::new(self.attributes, self.actions).size(),
            frame_channels: self.frame_channels(),
            clip_channels: self.clip_channels(),
            ln_eps: arch.ln_eps,
            s2d: true,
            d2s: true,
        }
    }
}

/// Loss weights λ1..λ5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub aux_static: f64,
    pub temporal: f64,
    pub aux_dynamic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 5.0, giou: 2.0, aux_static: 0.5, temporal: 5.0, aux_dynamic: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate to zero over `steps`; off means a flat rate.
    pub lr_decay: bool,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub train_frames: usize,
    pub test_frames: usize,
    pub weights: LossWeights,
    pub no_s2d: bool,
    pub no_d2s: bool,
    pub log_every: usize,
    pub test_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-4,
            lr_decay: false,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 0.0,
            seed: 0,
            train_frames: 8,
            test_frames: 16,
            weights: LossWeights::default(),
            no_s2d: false,
            no_d2s: false,
            log_every: 50,
            test_samples: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate for the update that completes step `step + 1`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.lr_decay {
            return self.lr;
        }
        let t = step.min(self.steps) as f64 / self.steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.train_frames == 0 || self.test_frames == 0 {
            return Err(Error::Config("steps, batch_size, train_frames and test_frames must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        let w = &self.weights;
        if [w.l1, w.giou, w.aux_static, w.temporal, w.aux_dynamic].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, parsed from one flat `key = value` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub gen: GenConfig,
    pub train: TrainConfig,
}

fn set<T: FromStr>(slot: &mut T, key: &str, value: &str) -> Result<()> {
    *slot = value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))?;
    Ok(())
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.gen.model_config(&self.arch);
        m.s2d = !self.train.no_s2d;
        m.d2s = !self.train.no_d2s;
        m
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (a, g, t) = (&mut self.arch, &mut self.gen, &mut self.train);
        match key {
            "layers" => set(&mut a.layers, key, v),
            "d_model" => set(&mut a.d_model, key, v),
            "d_moment" => set(&mut a.d_moment, key, v),
            "heads" => set(&mut a.heads, key, v),
            "ffn_ratio" => set(&mut a.ffn_ratio, key, v),
            "conv_layers" => set(&mut a.conv_layers, key, v),
            "ln_eps" => set(&mut a.ln_eps, key, v),
            "video_frames" => set(&mut g.video_frames, key, v),
            "clips" => set(&mut g.clips, key, v),
            "grid_h" => set(&mut g.grid_h, key, v),
            "grid_w" => set(&mut g.grid_w, key, v),
            "max_tokens" => set(&mut g.max_tokens, key, v),
            "attributes" => set(&mut g.attributes, key, v),
            "actions" => set(&mut g.actions, key, v),
            "distractors" => set(&mut g.distractors, key, v),
            "regime" => set(&mut g.regime, key, v),
            "min_box" => set(&mut g.min_box, key, v),
            "max_box" => set(&mut g.max_box, key, v),
            "min_span_clips" => set(&mut g.min_span_clips, key, v),
            "max_span_clips" => set(&mut g.max_span_clips, key, v),
            "max_speed" => set(&mut g.max_speed, key, v),
            "data_seed" => set(&mut g.seed, key, v),
            "samples" => set(&mut g.samples, key, v),
            "steps" => set(&mut t.steps, key, v),
            "batch_size" => set(&mut t.batch_size, key, v),
            "lr" => set(&mut t.lr, key, v),
            "lr_decay" => set(&mut t.lr_decay, key, v),
            "weight_decay" => set(&mut t.weight_decay, key, v),
            "beta1" => set(&mut t.beta1, key, v),
            "beta2" => set(&mut t.beta2, key, v),
            "grad_clip" => set(&mut t.grad_clip, key, v),
            "seed" => set(&mut t.seed, key, v),
            "train_frames" => set(&mut t.train_frames, key, v),
            "test_frames" => set(&mut t.test_frames, key, v),
            "lambda_l1" => set(&mut t.weights.l1, key, v),
            "lambda_giou" => set(&mut t.weights.giou, key, v),
            "lambda_aux_s" => set(&mut t.weights.aux_static, key, v),
            "lambda_tg" => set(&mut t.weights.temporal, key, v),
            "lambda_aux_d" => set(&mut t.weights.aux_dynamic, key, v),
            "no_s2d" => set(&mut t.no_s2d, key, v),
            "no_d2s" => set(&mut t.no_d2s, key, v),
            "log_every" => set(&mut t.log_every, key, v),
            "test_samples" => set(&mut t.test_samples, key, v),
            _ => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Inverse of [`RunConfig::parse`].
    pub fn to_kv(&self) -> String {
        let (a, g, t) = (&self.arch, &self.gen, &self.train);
        let pairs: Vec<(&str, String)> = vec![
            ("layers", a.layers.to_string()),
            ("d_model", a.d_model.to_string()),
            ("d_moment", a.d_moment.to_string()),
            ("heads", a.heads.to_string()),
            ("ffn_ratio", a.ffn_ratio.to_string()),
            ("conv_layers", a.conv_layers.to_string()),
            ("ln_eps", a.ln_eps.to_string()),
            ("video_frames", g.video_frames.to_string()),
            ("clips", g.clips.to_string()),
            ("grid_h", g.grid_h.to_string()),
            ("grid_w", g.grid_w.to_string()),
            ("max_tokens", g.max_tokens.to_string()),
            ("attributes", g.attributes.to_string()),
            ("actions", g.actions.to_string()),
            ("distractors", g.distractors.to_string()),
            ("regime", g.regime.as_str().to_string()),
            ("min_box", g.min_box.to_string()),
            ("max_box", g.max_box.to_string()),
            ("min_span_clips", g.min_span_clips.to_string()),
            ("max_span_clips", g.max_span_clips.to_string()),
            ("max_speed", g.max_speed.to_string()),
            ("data_seed", g.seed.to_string()),
            ("samples", g.samples.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("seed", t.seed.to_string()),
            ("train_frames", t.train_frames.to_string()),
            ("test_frames", t.test_frames.to_string()),
            ("lambda_l1", t.weights.l1.to_string()),
            ("lambda_giou", t.weights.giou.to_string()),
            ("lambda_aux_s", t.weights.aux_static.to_string()),
            ("lambda_tg", t.weights.temporal.to_string()),
            ("lambda_aux_d", t.weights.aux_dynamic.to_string()),
            ("no_s2d", t.no_s2d.to_string()),
            ("no_d2s", t.no_d2s.to_string()),
            ("log_every", t.log_every.to_string()),
            ("test_samples", t.test_samples.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Splits flat `key = value` text into ordered pairs.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", lineno + 1)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let w = LossWeights::default();
        assert_eq!((w.l1, w.giou, w.aux_static, w.temporal, w.aux_dynamic), (5.0, 2.0, 0.5, 5.0, 1.0));
        let m = ModelConfig::toy();
        assert_eq!((m.clips, m.grid_h, m.grid_w, m.d_model, m.d_moment), (8, 4, 4, 32, 16));
        assert_eq!((m.layers, m.max_tokens, m.heads), (2, 6, 2));
        let t = TrainConfig::default();
        assert_eq!((t.train_frames, t.test_frames, t.lr), (8, 16, 1e-4));
        assert_eq!(GenConfig::default().video_frames, 16);
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.gen.regime = Regime::Action;
        cfg.train.lr = 3e-4;
        cfg.train.no_d2s = true;
        assert_eq!(RunConfig::parse(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn parse_errors() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("steps = many").is_err());
        assert!(RunConfig::parse("steps").is_err());
        assert!(RunConfig::parse("steps = 1\nsteps = 2").is_err());
        let cfg = RunConfig::parse("# comment\n steps = 7  # trailing\n\nregime = action\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.gen.regime, Regime::Action);
    }
}
