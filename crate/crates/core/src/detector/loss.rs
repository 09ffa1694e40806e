//! SSD objective: objectness BCE with hard-negative mining plus smooth-L1 box regression.

use super::anchors::{encode_box, match_anchors, AnchorLabel};
use crate::error::Result;
use crate::geometry::BoundingBox;

/// Matched labels and regression targets for every anchor of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    /// Encoded offsets; zero for anchors that are not positive.
    pub offsets: Vec<[f64; 4]>,
}

impl AnchorTargets {
    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }
}

pub fn assign_targets(
    gts: &[BoundingBox],
    anchors: &[BoundingBox],
    iou_pos: f64,
    iou_neg: f64,
) -> Result<AnchorTargets> {
    let labels = match_anchors(gts, anchors, iou_pos, iou_neg);
    let mut offsets = vec![[0.0; 4]; anchors.len()];
    for (i, l) in labels.iter().enumerate() {
        if let AnchorLabel::Positive(g) = *l {
            offsets[i] = encode_box(&gts[g], &anchors[i])?;
        }
    }
    Ok(AnchorTargets { labels, offsets })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub classification: f64,
    pub localization: f64,
    pub num_positive: usize,
    pub num_negative_mined: usize,
    /// d(total)/d(prediction), same layout as the predictions.
    pub grad: Vec<[f64; 5]>,
}

/// Numerically stable `BCE(sigmoid(logit), target)`.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Smooth L1 with the quadratic/linear knee at 1.
pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    d.clamp(-1.0, 1.0)
}

/// Loss of one image, normalized by `max(num_positive, 1)`. Negatives are the
/// `neg_pos_ratio * max(num_positive, 1)` highest-loss negative anchors.
pub fn ssd_loss(preds: &[[f64; 5]], targets: &AnchorTargets, neg_pos_ratio: f64) -> LossOutput {
    assert_eq!(
        preds.len(),
        targets.labels.len(),
        "one prediction per anchor"
    );
    let npos = targets.num_positive();
    let norm = npos.max(1) as f64;
    let mut grad = vec![[0.0; 5]; preds.len()];
    let mut cls = 0.0;
    let mut loc = 0.0;
    let mut negatives = Vec::new();
    for (i, (p, l)) in preds.iter().zip(&targets.labels).enumerate() {
        match l {
            AnchorLabel::Positive(_) => {
                cls += bce_with_logit(p[4], 1.0);
                grad[i][4] = (super::infer::sigmoid(p[4]) - 1.0) / norm;
                for k in 0..4 {
                    let d = p[k] - targets.offsets[i][k];
                    loc += smooth_l1(d);
                    grad[i][k] = smooth_l1_grad(d) / norm;
                }
            }
            AnchorLabel::Negative => negatives.push((bce_with_logit(p[4], 0.0), i)),
            AnchorLabel::Ignore => {}
        }
    }
    let k = ((neg_pos_ratio * npos.max(1) as f64).round() as usize).min(negatives.len());
    // Highest loss first; equal losses keep the lower anchor index.
    negatives.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(l, i) in &negatives[..k] {
        cls += l;
        grad[i][4] = super::infer::sigmoid(preds[i][4]) / norm;
    }
    LossOutput {
        total: (cls + loc) / norm,
        classification: cls / norm,
        localization: loc / norm,
        num_positive: npos,
        num_negative_mined: k,
        grad,
    }
}
