//! Box IoU, tube vIoU and the aggregate report numbers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::heads::BBox;

/// Intersection over union of two center-size boxes; `0` when the union is empty.
pub fn box_iou(a: BBox, b: BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: u64,
    pub viou: f64,
    /// `(frame, IoU)` over the span intersection.
    pub frame_ious: Vec<(usize, f64)>,
}

/// Sum of per-frame IoU over the span intersection divided by the span union,
/// both counted in frames with inclusive endpoints. A frame in the
/// intersection missing from either tube counts as IoU 0.
pub fn viou_trace(
    pred_tube: &BTreeMap<usize, BBox>,
    pred_span: (usize, usize),
    gt_tube: &BTreeMap<usize, BBox>,
    gt_span: (usize, usize),
) -> Result<(f64, Vec<(usize, f64)>)> {
    if gt_span.0 > gt_span.1 {
        return invalid(format!("empty ground-truth span {:?}", gt_span));
    }
    if pred_span.0 > pred_span.1 {
        return invalid(format!("empty predicted span {:?}", pred_span));
    }
    let lo = pred_span.0.max(gt_span.0);
    let hi = pred_span.1.min(gt_span.1);
    let union = pred_span.1.max(gt_span.1) - pred_span.0.min(gt_span.0) + 1;
    let mut trace = Vec::new();
    let mut sum = 0.0;
    if lo <= hi {
        for t in lo..=hi {
            let iou = match (pred_tube.get(&t), gt_tube.get(&t)) {
                (Some(&p), Some(&g)) => box_iou(p, g),
                _ => 0.0,
            };
            sum += iou;
            trace.push((t, iou));
        }
    }
    Ok((sum / union as f64, trace))
}

pub fn viou(
    pred_tube: &BTreeMap<usize, BBox>,
    pred_span: (usize, usize),
    gt_tube: &BTreeMap<usize, BBox>,
    gt_span: (usize, usize),
) -> Result<f64> {
    Ok(viou_trace(pred_tube, pred_span, gt_tube, gt_span)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub m_viou: f64,
    /// Fraction with vIoU strictly above 0.3.
    pub viou_03: f64,
    /// Fraction with vIoU strictly above 0.5.
    pub viou_05: f64,
    pub count: usize,
}

/// Fraction of values strictly greater than `r`.
pub fn recall_above(values: &[f64], r: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v > r).count() as f64 / values.len() as f64
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return invalid("aggregate needs at least one record");
    }
    Ok(Aggregate {
        m_viou: values.iter().sum::<f64>() / values.len() as f64,
        viou_03: recall_above(values, 0.3),
        viou_05: recall_above(values, 0.5),
        count: values.len(),
    })
}

pub fn aggregate_records(records: &[EvalRecord]) -> Result<Aggregate> {
    aggregate(&records.iter().map(|r| r.viou).collect::<Vec<_>>())
}
