//! Classical source extraction: robust background, 5-sigma threshold,
//! 8-connected components, and a second-moment shape test.

use serde::{Deserialize, Serialize};

use crate::detector::infer::median_mad;
use crate::geometry::{BoundingBox, Detection};
use crate::raster::Gray16;
use crate::scenegen::TrackingMode;

pub const DETECTION_SIGMA: f64 = 5.0;
pub const MAD_TO_SIGMA: f64 = 1.4826;
/// Components at or above this axis ratio are streaks.
pub const ELONGATION_SPLIT: f64 = 2.0;
pub const MIN_PIXELS: usize = 2;
/// Pixels added on each side of a component's bounds.
pub const BOX_PAD_PX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceShape {
    Point,
    Streak,
}

impl SourceShape {
    /// Shape of the targets in a given tracking mode.
    pub fn of_targets(mode: TrackingMode) -> Self {
        match mode {
            TrackingMode::RateTrack => SourceShape::Point,
            TrackingMode::Sidereal => SourceShape::Streak,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub pixels: usize,
    pub bounds: (usize, usize, usize, usize),
    pub peak_snr: f64,
    pub elongation: f64,
    pub shape: SourceShape,
}

/// All thresholded components of a frame.
pub fn extract_components(frame: &Gray16) -> Vec<Component> {
    let (w, h) = (frame.width, frame.height);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let vals: Vec<f64> = frame.data.iter().map(|&v| v as f64).collect();
    let (bg, mad) = median_mad(&vals);
    let sigma = (MAD_TO_SIGMA * mad).max(1.0);
    let thr = bg + DETECTION_SIGMA * sigma;
    let mut label = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if label[start] || vals[start] <= thr {
            continue;
        }
        label[start] = true;
        stack.push(start);
        let (mut n, mut sw, mut sx, mut sy) = (0usize, 0.0, 0.0, 0.0);
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut peak = f64::NEG_INFINITY;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let v = vals[i] - bg;
            n += 1;
            peak = peak.max(v);
            let (fx, fy) = (x as f64, y as f64);
            sw += v;
            sx += v * fx;
            sy += v * fy;
            sxx += v * fx * fx;
            syy += v * fy * fy;
            sxy += v * fx * fy;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !label[j] && vals[j] > thr {
                        label[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if n < MIN_PIXELS {
            continue;
        }
        let (mx, my) = (sx / sw, sy / sw);
        // Pixel-integrated second moments include the 1/12 of a unit box.
        let cxx = sxx / sw - mx * mx + 1.0 / 12.0;
        let cyy = syy / sw - my * my + 1.0 / 12.0;
        let cxy = sxy / sw - mx * my;
        let tr = cxx + cyy;
        let disc = ((cxx - cyy).powi(2) / 4.0 + cxy * cxy).sqrt();
        let l1 = tr / 2.0 + disc;
        let l2 = (tr / 2.0 - disc).max(1e-12);
        let elongation = (l1 / l2).sqrt();
        out.push(Component {
            pixels: n,
            bounds: (x0, y0, x1, y1),
            peak_snr: peak / sigma,
            elongation,
            shape: if elongation < ELONGATION_SPLIT {
                SourceShape::Point
            } else {
                SourceShape::Streak
            },
        });
    }
    out
}

/// Components of the expected shape as detections, confidence `min(1, peak_snr / 20)`.
pub fn baseline_detect(frame: &Gray16, expected: SourceShape) -> Vec<Detection> {
    let mut dets: Vec<Detection> = extract_components(frame)
        .into_iter()
        .filter(|c| c.shape == expected)
        .filter_map(|c| {
            let (x0, y0, x1, y1) = c.bounds;
            let b = BoundingBox {
                x_min: x0 as f64 - BOX_PAD_PX,
                y_min: y0 as f64 - BOX_PAD_PX,
                x_max: (x1 + 1) as f64 + BOX_PAD_PX,
                y_max: (y1 + 1) as f64 + BOX_PAD_PX,
            }
            .clamp_to(frame.width, frame.height);
            b.is_valid().then(|| Detection {
                bbox: b,
                confidence: (c.peak_snr / 20.0).min(1.0),
            })
        })
        .collect();
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    dets
}
