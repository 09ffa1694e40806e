//! Anchor grid, SSD box parameterization and anchor/ground-truth matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

/// Center offsets are divided by `0.1 * anchor size`, log sizes by `0.2`.
pub const CENTER_VARIANCE: f64 = 0.1;
pub const SIZE_VARIANCE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub feature_map_strides: Vec<usize>,
    /// One list of square-equivalent sizes (input pixels) per feature map.
    pub anchor_scales_px: Vec<Vec<f64>>,
    /// Width / height.
    pub aspect_ratios: Vec<f64>,
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("anchor config: {m}")));
        if self.feature_map_strides.is_empty() {
            return err("no feature maps".into());
        }
        if self.anchor_scales_px.len() != self.feature_map_strides.len() {
            return err(format!(
                "{} scale lists for {} feature maps",
                self.anchor_scales_px.len(),
                self.feature_map_strides.len()
            ));
        }
        if self.feature_map_strides.contains(&0) {
            return err("zero stride".into());
        }
        let n = self.anchor_scales_px[0].len();
        if n == 0 || self.anchor_scales_px.iter().any(|s| s.len() != n) {
            return err("every feature map needs the same, non-zero number of scales".into());
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.anchor_scales_px.iter().flatten().all(positive) {
            return err("scales must be positive".into());
        }
        if self.aspect_ratios.is_empty() || !self.aspect_ratios.iter().all(positive) {
            return err("aspect ratios must be positive and non-empty".into());
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales_px.first().map_or(0, Vec::len) * self.aspect_ratios.len()
    }

    /// Feature-map sizes for an input of `(h, w)`.
    pub fn map_sizes(&self, input: (usize, usize)) -> Vec<(usize, usize)> {
        self.feature_map_strides
            .iter()
            .map(|&s| (input.0.div_ceil(s), input.1.div_ceil(s)))
            .collect()
    }
}

/// All anchors in fixed order: feature map, then cell (row-major), then
/// scale, then aspect ratio.
pub fn build_anchors(config: &AnchorConfig, input: (usize, usize)) -> Result<Vec<BoundingBox>> {
    config.validate()?;
    let (h, w) = (input.0 as f64, input.1 as f64);
    let mut out = Vec::new();
    for ((&stride, scales), (fh, fw)) in config
        .feature_map_strides
        .iter()
        .zip(&config.anchor_scales_px)
        .zip(config.map_sizes(input))
    {
        let mut shapes = Vec::with_capacity(scales.len() * config.aspect_ratios.len());
        for &s in scales {
            for &r in &config.aspect_ratios {
                let (aw, ah) = (s * r.sqrt(), s / r.sqrt());
                if aw > w || ah > h {
                    return Err(Error::Config(format!(
                        "anchor {aw:.1}x{ah:.1} (scale {s}, ratio {r}) exceeds the {}x{} input",
                        input.1, input.0
                    )));
                }
                shapes.push((aw, ah));
            }
        }
        for i in 0..fh {
            for j in 0..fw {
                let cx = (j as f64 + 0.5) * stride as f64;
                let cy = (i as f64 + 0.5) * stride as f64;
                for &(aw, ah) in &shapes {
                    out.push(BoundingBox::from_center(cx, cy, aw, ah));
                }
            }
        }
    }
    Ok(out)
}

/// Regression targets `(tx, ty, tw, th)` of `gt` relative to `anchor`.
pub fn encode_box(gt: &BoundingBox, anchor: &BoundingBox) -> Result<[f64; 4]> {
    if !(gt.width() > 0.0 && gt.height() > 0.0 && anchor.width() > 0.0 && anchor.height() > 0.0) {
        return Err(Error::Data(
            "encode_box needs positive box dimensions".into(),
        ));
    }
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok([
        (gx - ax) / (aw * CENTER_VARIANCE),
        (gy - ay) / (ah * CENTER_VARIANCE),
        (gt.width() / aw).ln() / SIZE_VARIANCE,
        (gt.height() / ah).ln() / SIZE_VARIANCE,
    ])
}

/// Inverse of [`encode_box`].
pub fn decode_box(t: &[f64; 4], anchor: &BoundingBox) -> BoundingBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + t[0] * CENTER_VARIANCE * aw;
    let cy = ay + t[1] * CENTER_VARIANCE * ah;
    // Bound the exponent so untrained heads cannot overflow.
    let w = aw * (t[2] * SIZE_VARIANCE).clamp(-20.0, 20.0).exp();
    let h = ah * (t[3] * SIZE_VARIANCE).clamp(-20.0, 20.0).exp();
    BoundingBox::from_center(cx, cy, w, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// Positive if IoU >= `iou_pos` with some ground truth (assigned to the best
/// one), plus each ground truth's best anchor; negative if the best IoU is
/// below `iou_neg`; otherwise ignored. Ties go to the lower index.
pub fn match_anchors(
    gts: &[BoundingBox],
    anchors: &[BoundingBox],
    iou_pos: f64,
    iou_neg: f64,
) -> Vec<AnchorLabel> {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return labels;
    }
    let mut best_anchor = vec![(usize::MAX, f64::NEG_INFINITY); gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(gt, anchor);
            if v > best.1 {
                best = (g, v);
            }
            if v > best_anchor[g].1 {
                best_anchor[g] = (a, v);
            }
        }
        labels[a] = if best.1 >= iou_pos {
            AnchorLabel::Positive(best.0)
        } else if best.1 < iou_neg {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    let mut forced = vec![false; anchors.len()];
    for (g, &(a, _)) in best_anchor.iter().enumerate() {
        if a != usize::MAX && !forced[a] {
            forced[a] = true;
            labels[a] = AnchorLabel::Positive(g);
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(strides: Vec<usize>, scales: Vec<Vec<f64>>, ratios: Vec<f64>) -> AnchorConfig {
        AnchorConfig {
            feature_map_strides: strides,
            anchor_scales_px: scales,
            aspect_ratios: ratios,
        }
    }

    #[test]
    fn single_map_counts_and_centers() {
        let a = build_anchors(&cfg(vec![8], vec![vec![4.0]], vec![1.0]), (32, 32)).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a[0].center(), (4.0, 4.0));
        assert_eq!(a[5].center(), (12.0, 12.0));
        assert!(a.iter().all(|b| b.width() == 4.0 && b.height() == 4.0));
    }

    #[test]
    fn two_maps_give_7680_anchors() {
        let c = cfg(
            vec![8, 16],
            vec![vec![6.0, 12.0], vec![24.0, 48.0]],
            vec![1.0, 3.0, 1.0 / 3.0],
        );
        assert_eq!(
            build_anchors(&c, (256, 256)).unwrap().len(),
            32 * 32 * 6 + 16 * 16 * 6
        );
    }

    #[test]
    fn oversized_anchor_is_rejected() {
        let c = cfg(vec![8], vec![vec![40.0]], vec![1.0]);
        assert!(build_anchors(&c, (32, 32)).is_err());
    }

    #[test]
    fn identity_encoding() {
        let a = BoundingBox::new(2.0, 3.0, 10.0, 7.0).unwrap();
        assert_eq!(encode_box(&a, &a).unwrap(), [0.0; 4]);
        assert_eq!(decode_box(&[0.0; 4], &a), a);
        let flat = BoundingBox {
            x_min: 1.0,
            y_min: 1.0,
            x_max: 1.0,
            y_max: 2.0,
        };
        assert!(encode_box(&flat, &a).is_err());
    }

    #[test]
    fn matching_rules() {
        let anchors = [
            BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            BoundingBox::new(20.0, 0.0, 30.0, 10.0).unwrap(),
            BoundingBox::new(1.0, 0.0, 11.0, 10.0).unwrap(),
        ];
        assert!(match_anchors(&[], &anchors, 0.5, 0.4)
            .iter()
            .all(|l| *l == AnchorLabel::Negative));
        let l = match_anchors(&[anchors[0]], &anchors, 0.5, 0.4);
        assert_eq!(l[0], AnchorLabel::Positive(0));
        assert_eq!(l[1], AnchorLabel::Negative);
        assert_eq!(l[2], AnchorLabel::Positive(0));
        let faint = BoundingBox::new(9.0, 0.0, 19.0, 2.0).unwrap();
        let l = match_anchors(&[faint], &anchors, 0.5, 0.4);
        assert_eq!(
            l.iter()
                .filter(|x| matches!(x, AnchorLabel::Positive(_)))
                .count(),
            1
        );
    }
}
