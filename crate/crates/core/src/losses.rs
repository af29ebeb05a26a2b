//! Training objective: box regression inside the ground-truth span, BCE on the
//! proposal map against temporal IoU targets, and the two masked
//! log-likelihood terms on frame and clip scores.

use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{invalid, shape_err, Result};
use crate::heads::{BBox, TemporalSpan};
use crate::tensor::{Tape, Tensor, Var};

/// Probability clamp for every log term.
pub const PROB_EPS: f64 = 1e-7;
/// Floor on box and enclosing-box areas.
pub const AREA_EPS: f64 = 1e-8;

fn masked_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Mean absolute error over the 4 coordinates of the masked frames.
/// `pred` is `[F, 4]`, `gt` is `[F, 4]` (rows outside the mask are ignored).
pub fn l1_box_loss(pred: &Var, gt: &Var, mask: &[bool]) -> Result<Var> {
    let s = pred.shape();
    if s.len() != 2 || s[1] != 4 || gt.shape() != s || mask.len() != s[0] {
        return shape_err("l1_box_loss", format!("pred {:?}, gt {:?}, mask {}", s, gt.shape(), mask.len()));
    }
    let rows = masked_rows(mask);
    if rows.is_empty() {
        return invalid("l1_box_loss: empty mask");
    }
    pred.index_select(&rows)?.sub(&gt.index_select(&rows)?)?.abs()?.mean_all()
}

fn corners(b: &Var) -> Result<[Var; 4]> {
    let col = |k| b.narrow(1, k, 1);
    let (cx, cy, w, h) = (col(0)?, col(1)?, col(2)?, col(3)?);
    let hw = w.scale(0.5)?;
    let hh = h.scale(0.5)?;
    Ok([cx.sub(&hw)?, cy.sub(&hh)?, cx.add(&hw)?, cy.add(&hh)?])
}

/// Per-row generalized IoU of two `[n, 4]` center-size box sets: `[n, 1]`.
pub fn giou(a: &Var, b: &Var) -> Result<Var> {
    let s = a.shape();
    if s.len() != 2 || s[1] != 4 || b.shape() != s {
        return shape_err("giou", format!("{:?} vs {:?}", s, b.shape()));
    }
    let [ax1, ay1, ax2, ay2] = corners(a)?;
    let [bx1, by1, bx2, by2] = corners(b)?;
    let area = |x1: &Var, y1: &Var, x2: &Var, y2: &Var| -> Result<Var> {
        x2.sub(x1)?.mul(&y2.sub(y1)?)?.clamp(AREA_EPS, f64::INFINITY)
    };
    let area_a = area(&ax1, &ay1, &ax2, &ay2)?;
    let area_b = area(&bx1, &by1, &bx2, &by2)?;
    let iw = ax2.minimum(&bx2)?.sub(&ax1.maximum(&bx1)?)?.relu()?;
    let ih = ay2.minimum(&by2)?.sub(&ay1.maximum(&by1)?)?.relu()?;
    let inter = iw.mul(&ih)?;
    let union = area_a.add(&area_b)?.sub(&inter)?;
    let iou = inter.div(&union)?;
    let cw = ax2.maximum(&bx2)?.sub(&ax1.minimum(&bx1)?)?;
    let ch = ay2.maximum(&by2)?.sub(&ay1.minimum(&by1)?)?;
    let enclosing = cw.mul(&ch)?.clamp(AREA_EPS, f64::INFINITY)?;
    iou.sub(&enclosing.sub(&union)?.div(&enclosing)?)
}

/// Mean of `1 − GIoU` over rows of two `[n, 4]` box sets.
pub fn giou_loss(pred: &Var, gt: &Var) -> Result<Var> {
    giou(pred, gt)?.neg()?.add_scalar(1.0)?.mean_all()
}

/// `1 − GIoU` of a single pair, evaluated on a scratch tape.
pub fn giou_loss_value(pred: BBox, gt: BBox) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.constant(Tensor::new(&[1, 4], pred.to_array().to_vec())?);
    let b = tape.constant(Tensor::new(&[1, 4], gt.to_array().to_vec())?);
    giou_loss(&a, &b)?.item()
}

/// Inclusive-count temporal IoU of every proposal `(i, j)`, `i ≤ j`, with `gt`.
pub fn iou_target_map(gt: TemporalSpan, t: usize) -> Result<Tensor> {
    if gt.end >= t {
        return invalid(format!("span {}..={} outside {t} clips", gt.start, gt.end));
    }
    let mut y = vec![0.0; t * t];
    for i in 0..t {
        for j in i..t {
            let inter = (j.min(gt.end) + 1).saturating_sub(i.max(gt.start));
            let union = j.max(gt.end) - i.min(gt.start) + 1;
            y[i * t + j] = inter as f64 / union as f64;
        }
    }
    Tensor::new(&[t, t], y)
}

/// Mean BCE over the valid (`i ≤ j`) cells of a `[T, T]` score map.
pub fn temporal_grounding_loss(scores: &Var, target: &Tensor) -> Result<Var> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != s[1] || target.shape() != s.as_slice() {
        return shape_err("temporal_grounding_loss", format!("scores {:?}, target {:?}", s, target.shape()));
    }
    let t = s[0];
    let cells: Vec<usize> = (0..t * t).filter(|k| k / t <= k % t).collect();
    let p = scores.reshape(&[t * t])?.index_select(&cells)?.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let y: Vec<f64> = cells.iter().map(|&k| target.data()[k]).collect();
    let y = scores.tape().constant(Tensor::new(&[cells.len()], y.clone())?);
    let one_minus_y = y.neg()?.add_scalar(1.0)?;
    let pos = y.mul(&p.log()?)?;
    let neg = one_minus_y.mul(&p.neg()?.add_scalar(1.0)?.log()?)?;
    pos.add(&neg)?.mean_all()?.neg()
}

/// `−Σ m_t log p_t / Σ m_t`; positions outside the mask do not enter.
pub fn temporal_attentive_loss(p: &Var, mask: &[bool]) -> Result<Var> {
    let s = p.shape();
    if s.len() != 1 || s[0] != mask.len() {
        return shape_err("temporal_attentive_loss", format!("p {:?}, mask {}", s, mask.len()));
    }
    let rows = masked_rows(mask);
    if rows.is_empty() {
        return invalid("temporal_attentive_loss: empty mask");
    }
    p.index_select(&rows)?.clamp(PROB_EPS, 1.0 - PROB_EPS)?.log()?.mean_all()?.neg()
}

/// Model outputs entering the objective for one sample.
#[derive(Clone, Debug)]
pub struct LossInputs {
    /// `[F, 4]`
    pub boxes: Var,
    /// `[F]`
    pub frame_scores: Var,
    /// `[T, T]`
    pub score_map: Var,
    /// `[T]`
    pub clip_scores: Var,
}

/// Supervision for one sample at the sampled frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `[F, 4]`; rows outside the span are zero and unused.
    pub boxes: Tensor,
    pub frame_mask: Vec<bool>,
    pub clip_mask: Vec<bool>,
    pub iou_map: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub giou: f64,
    pub aux_static: f64,
    pub temporal: f64,
    pub aux_dynamic: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.l1 * self.l1
            + w.giou * self.giou
            + w.aux_static * self.aux_static
            + w.temporal * self.temporal
            + w.aux_dynamic * self.aux_dynamic
    }
}

/// Weighted sum of all five terms.
///
/// When none of the sampled frames falls inside the span the three
/// frame-level terms are zero.
pub fn total_loss(out: &LossInputs, gt: &Targets, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let tape = out.boxes.tape();
    let rows = masked_rows(&gt.frame_mask);
    let zero = || tape.constant(Tensor::scalar(0.0));
    let (l1, gi, aux_s) = if rows.is_empty() {
        (zero(), zero(), zero())
    } else {
        let gt_boxes = tape.constant(gt.boxes.clone());
        let l1 = l1_box_loss(&out.boxes, &gt_boxes, &gt.frame_mask)?;
        let gi = giou_loss(&out.boxes.index_select(&rows)?, &gt_boxes.index_select(&rows)?)?;
        let aux_s = temporal_attentive_loss(&out.frame_scores, &gt.frame_mask)?;
        (l1, gi, aux_s)
    };
    let tg = temporal_grounding_loss(&out.score_map, &gt.iou_map)?;
    let aux_d = temporal_attentive_loss(&out.clip_scores, &gt.clip_mask)?;
    let total = l1
        .scale(w.l1)?
        .add(&gi.scale(w.giou)?)?
        .add(&aux_s.scale(w.aux_static)?)?
        .add(&tg.scale(w.temporal)?)?
        .add(&aux_d.scale(w.aux_dynamic)?)?;
    let b = LossBreakdown {
        l1: l1.item()?,
        giou: gi.item()?,
        aux_static: aux_s.item()?,
        temporal: tg.item()?,
        aux_dynamic: aux_d.item()?,
        total: total.item()?,
    };
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(t: &Tape, shape: &[usize], v: Vec<f64>) -> Var {
        t.constant(Tensor::new(shape, v).unwrap())
    }

    #[test]
    fn l1_worked_example() {
        let t = Tape::new();
        let p = c(&t, &[1, 4], vec![0.5, 0.5, 0.2, 0.2]);
        let g = c(&t, &[1, 4], vec![0.5, 0.5, 0.4, 0.2]);
        let v = l1_box_loss(&p, &g, &[true]).unwrap().item().unwrap();
        assert!((v - 0.05).abs() < 1e-15);
        assert!(l1_box_loss(&p, &g, &[false]).is_err());
    }

    #[test]
    fn giou_closed_forms() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert!(giou_loss_value(a, a).unwrap().abs() < 1e-15);
        let b = BBox::new(1.5, 0.5, 1.0, 1.0);
        assert!((giou_loss_value(a, b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn iou_map_examples() {
        let y = iou_target_map(TemporalSpan { start: 1, end: 2 }, 4).unwrap();
        assert_eq!(y.data()[3], 0.5);
        assert_eq!(y.data()[4 + 2], 1.0);
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[4], 0.0);
    }

    #[test]
    fn attentive_loss_half_is_ln2() {
        let t = Tape::new();
        let p = c(&t, &[3], vec![0.5, 0.5, 0.01]);
        let v = temporal_attentive_loss(&p, &[true, true, false]).unwrap().item().unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
