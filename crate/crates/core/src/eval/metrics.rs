//! Greedy detection matching and precision/recall/F1.

use serde::Serialize;

use crate::geometry::{iou, BoundingBox, Detection};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(detection index, ground-truth index, iou)`.
    pub matched_pairs: Vec<(usize, usize, f64)>,
}

/// Drop detections below `conf_thr`, then in descending confidence let each
/// claim the unmatched ground truth with the highest IoU, if that IoU reaches
/// `iou_thr`. Ties go to the lower index.
pub fn match_detections(
    dets: &[Detection],
    gts: &[BoundingBox],
    iou_thr: f64,
    conf_thr: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].confidence >= conf_thr)
        .collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut taken = vec![false; gts.len()];
    let mut m = MatchResult::default();
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[d].bbox, gt);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) => {
                taken[g] = true;
                m.tp += 1;
                m.matched_pairs.push((d, g, v));
            }
            None => m.fp += 1,
        }
    }
    m.fn_ = gts.len() - m.tp;
    m
}

/// `(precision, recall, f1)` with `0/0 = 0`.
pub fn precision_recall_f1(m: &MatchResult) -> (f64, f64, f64) {
    let p = ratio(m.tp, m.tp + m.fp);
    let r = ratio(m.tp, m.tp + m.fn_);
    (p, r, f1_score(p, r))
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameEval {
    pub frame: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub confidence_threshold: f64,
    pub iou_match_threshold: f64,
    pub n_frames: usize,
    pub n_targets: usize,
    pub per_frame: Vec<FrameEval>,
}

/// Pool matches over frames. `dets[i]` and `gts[i]` belong to frame `i`.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<BoundingBox>],
    iou_thr: f64,
    conf_thr: f64,
) -> EvalReport {
    assert_eq!(dets.len(), gts.len(), "one detection list per frame");
    let mut total = MatchResult::default();
    let mut per_frame = Vec::with_capacity(dets.len());
    for (i, (d, g)) in dets.iter().zip(gts).enumerate() {
        let m = match_detections(d, g, iou_thr, conf_thr);
        per_frame.push(FrameEval {
            frame: i,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        });
        total.tp += m.tp;
        total.fp += m.fp;
        total.fn_ += m.fn_;
    }
    let (precision, recall, f1) = precision_recall_f1(&total);
    EvalReport {
        precision,
        recall,
        f1,
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        confidence_threshold: conf_thr,
        iou_match_threshold: iou_thr,
        n_frames: dets.len(),
        n_targets: gts.iter().map(Vec::len).sum(),
        per_frame,
    }
}
