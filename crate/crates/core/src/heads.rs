//! Prediction heads: boxes and frame scores from the static queries; the dense
//! proposal map, span choice and clip scores from the dynamic stream.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Conv2d, Ctx, Linear, Mlp, ParamStore};
use crate::tensor::{Tensor, Var};

/// Normalized center-size box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// Inclusive clip span `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalSpan {
    pub start: usize,
    pub end: usize,
}

impl TemporalSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return invalid(format!("span start {start} after end {end}"));
        }
        Ok(Self { start, end })
    }

    pub fn contains(self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn len(self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub bbox: Mlp,
    pub frame_score: Linear,
    pub moment_proj: Linear,
    pub convs: Vec<Conv2d>,
    pub score_out: Conv2d,
    pub aux: Mlp,
}

impl Heads {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let (d, dm) = (cfg.d_model, cfg.d_moment);
        Self {
            bbox: Mlp::new(store, "heads.bbox", &[d, d, d, 4]),
            frame_score: Linear::new(store, "heads.frame_score", d, 1),
            moment_proj: Linear::new(store, "heads.moment_proj", d, dm),
            convs: (0..cfg.conv_layers).map(|i| Conv2d::new(store, &format!("heads.conv.{i}"), 3, dm, dm)).collect(),
            score_out: Conv2d::new(store, "heads.score_out", 1, dm, 1),
            aux: Mlp::new(store, "heads.aux", &[dm, dm, dm, 1]),
        }
    }
}

/// Final queries `[F, d]` → boxes `[F, 4]` in `(0, 1)`.
pub fn predict_bbox(ctx: &Ctx, heads: &Heads, queries: &Var) -> Result<Var> {
    heads.bbox.forward(ctx, queries)?.sigmoid()
}

/// Final queries `[F, d]` → inside-moment probabilities `[F]`.
pub fn predict_frame_score(ctx: &Ctx, heads: &Heads, queries: &Var) -> Result<Var> {
    let f = queries.shape()[0];
    heads.frame_score.forward(ctx, queries)?.sigmoid()?.reshape(&[f])
}

/// Last dynamic stream `[T, H·W, d]` → `F_d` `[T, d_m]`.
pub fn moment_features(ctx: &Ctx, heads: &Heads, fv: &Var) -> Result<Var> {
    heads.moment_proj.forward(ctx, &fv.mean_axes(&[1], false)?)
}

/// `[T·T, T]` matrix whose row `i·T + j` averages clips `i..=j` (zero row when `i > j`).
pub fn proposal_pooling_matrix(t: usize) -> Tensor {
    let mut p = vec![0.0; t * t * t];
    for i in 0..t {
        for j in i..t {
            let w = 1.0 / (j - i + 1) as f64;
            for k in i..=j {
                p[(i * t + j) * t + k] = w;
            }
        }
    }
    Tensor::new(&[t * t, t], p).expect("pooling matrix shape")
}

/// `F_d` `[T, d_m]` → proposal map `[T, T, d_m]` of span means.
pub fn build_proposal_map(ctx: &Ctx, fd: &Var) -> Result<Var> {
    let s = fd.shape();
    if s.len() != 2 || s[0] == 0 {
        return shape_err("build_proposal_map", format!("F_d {:?}", s));
    }
    let t = s[0];
    let p = ctx.constant(proposal_pooling_matrix(t));
    p.matmul(fd)?.reshape(&[t, t, s[1]])
}

/// `1` where `i ≤ j`, else `0`.
pub fn valid_mask(t: usize) -> Tensor {
    let data = (0..t * t).map(|k| if k / t <= k % t { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[t, t], data).expect("mask shape")
}

/// Proposal map `[T, T, d_m]` → scores `[T, T]`, zero below the diagonal.
pub fn score_proposals(ctx: &Ctx, heads: &Heads, map: &Var) -> Result<Var> {
    let s = map.shape();
    if s.len() != 3 || s[0] != s[1] {
        return shape_err("score_proposals", format!("map {:?}", s));
    }
    let mut x = map.clone();
    for c in &heads.convs {
        x = c.forward(ctx, &x)?.relu()?;
    }
    let logits = heads.score_out.forward(ctx, &x)?.reshape(&[s[0], s[1]])?;
    logits.sigmoid()?.mul(&ctx.constant(valid_mask(s[0])))
}

/// Highest-scoring valid cell; ties go to the smallest `i`, then `j`.
pub fn select_span(scores: &Tensor) -> Result<TemporalSpan> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return shape_err("select_span", format!("scores {:?}", s));
    }
    let t = s[0];
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..t {
        for j in i..t {
            let v = scores.data()[i * t + j];
            if v > best_v {
                best_v = v;
                best = (i, j);
            }
        }
    }
    TemporalSpan::new(best.0, best.1)
}

/// `F_d` `[T, d_m]` → per-clip probabilities `[T]`.
pub fn aux_clip_scores(ctx: &Ctx, heads: &Heads, fd: &Var) -> Result<Var> {
    let t = fd.shape()[0];
    heads.aux.forward(ctx, fd)?.sigmoid()?.reshape(&[t])
}

/// Final output for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: u64,
    pub span: TemporalSpan,
    /// Inclusive frame range covered by `span`.
    pub frame_span: (usize, usize),
    pub seconds: (f64, f64),
    /// `(frame, box)` for every tube frame, ascending.
    pub boxes: Vec<(usize, BBox)>,
    /// `(frame, p̂)` for every evaluated frame.
    pub frame_scores: Vec<(usize, f64)>,
    pub span_score: f64,
}

/// Restricts per-frame boxes to the frames whose clip lies in `span`.
///
/// `frames`, `boxes` and `frame_scores` are aligned; `frame_to_clip` covers
/// every video frame.
pub fn assemble_prediction(
    sample_id: u64,
    frames: &[usize],
    boxes: &[BBox],
    frame_scores: &[f64],
    span: TemporalSpan,
    span_score: f64,
    clip_duration: f64,
    frame_to_clip: &[usize],
) -> Result<Prediction> {
    if frames.len() != boxes.len() || frames.len() != frame_scores.len() {
        return invalid("frames, boxes and scores must align");
    }
    if let Some(&f) = frames.iter().find(|&&f| f >= frame_to_clip.len()) {
        return invalid(format!("frame {f} outside the video"));
    }
    let inside: Vec<usize> = (0..frame_to_clip.len()).filter(|&t| span.contains(frame_to_clip[t])).collect();
    let (Some(&first), Some(&last)) = (inside.first(), inside.last()) else {
        return invalid(format!("span {}..={} covers no frame", span.start, span.end));
    };
    let mut tube: Vec<(usize, BBox)> =
        frames.iter().zip(boxes).filter(|(&f, _)| span.contains(frame_to_clip[f])).map(|(&f, &b)| (f, b)).collect();
    tube.sort_by_key(|&(f, _)| f);
    let mut scores: Vec<(usize, f64)> = frames.iter().copied().zip(frame_scores.iter().copied()).collect();
    scores.sort_by_key(|&(f, _)| f);
    Ok(Prediction {
        sample_id,
        span,
        frame_span: (first, last),
        seconds: (span.start as f64 * clip_duration, (span.end + 1) as f64 * clip_duration),
        boxes: tube,
        frame_scores: scores,
        span_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_matrix_rows() {
        let p = proposal_pooling_matrix(3);
        // row (0,2)
        assert_eq!(&p.data()[2 * 3..3 * 3], &[1.0 / 3.0; 3]);
        // row (2,0) is zero
        assert_eq!(&p.data()[6 * 3..7 * 3], &[0.0; 3]);
    }

    #[test]
    fn select_span_ties_and_peak() {
        let s = Tensor::full(&[3, 3], 0.2);
        assert_eq!(select_span(&s).unwrap(), TemporalSpan { start: 0, end: 0 });
        let mut s = Tensor::zeros(&[4, 4]);
        s.data_mut()[7] = 0.9;
        assert_eq!(select_span(&s).unwrap(), TemporalSpan { start: 1, end: 3 });
        // lower-triangle values are ignored
        s.data_mut()[4] = 5.0;
        assert_eq!(select_span(&s).unwrap(), TemporalSpan { start: 1, end: 3 });
    }

    #[test]
    fn assemble_worked_example() {
        let map = vec![0, 0, 1, 1];
        let b: Vec<BBox> = (0..4).map(|i| BBox::new(0.1 * i as f64, 0.5, 0.2, 0.2)).collect();
        let p = assemble_prediction(7, &[0, 1, 2, 3], &b, &[0.5; 4], TemporalSpan { start: 1, end: 1 }, 0.8, 2.0, &map)
            .unwrap();
        assert_eq!(p.boxes.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(p.frame_span, (2, 3));
        assert_eq!(p.seconds, (2.0, 4.0));
    }
}
