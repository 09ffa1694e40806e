//! Input preprocessing, head decoding, NMS and the float `detect` path.

use satdet_nn::Tensor;

use super::anchors::decode_box;
use super::model::{DetectorModel, Precision, VALUES_PER_ANCHOR};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, Detection};
use crate::raster::Gray16;

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    let axis = |s: usize, d: usize| -> Vec<(usize, usize, f64)> {
        let r = s as f64 / d as f64;
        (0..d)
            .map(|i| {
                let p = ((i as f64 + 0.5) * r - 0.5).clamp(0.0, (s - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(s - 1);
                (i0, i1, p - i0 as f64)
            })
            .collect()
    };
    let xs = axis(sw, dw);
    let ys = axis(sh, dh);
    let mut out = Vec::with_capacity(dw * dh);
    for &(y0, y1, fy) in &ys {
        let r0 = &src[y0 * sw..(y0 + 1) * sw];
        let r1 = &src[y1 * sw..(y1 + 1) * sw];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + fx * (r0[x1] - r0[x0]);
            let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
            out.push(top + fy * (bot - top));
        }
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if n % 2 == 1 {
        m
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + m)
    }
}

/// Median and MAD of a sample.
pub fn median_mad(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mut v = values.to_vec();
    let med = median(&mut v);
    for x in v.iter_mut() {
        *x = (*x - med).abs();
    }
    (med, median(&mut v))
}

/// Scale to `[0, 1]` by the 16-bit maximum, resize bilinearly to the network
/// input, then standardize by the frame's median and MAD and compress with
/// `asinh(z / 4)` so faint sources and bright stars share a usable range.
pub fn preprocess(img: &Gray16, input: (usize, usize)) -> Tensor {
    let unit: Vec<f64> = img.data.iter().map(|&v| v as f64 / 65535.0).collect();
    let (h, w) = input;
    let mut r = resize_bilinear(&unit, img.width, img.height, w, h);
    let (med, mad) = median_mad(&r);
    let noise = (1.4826 * mad).max(1.0 / 65535.0);
    for v in r.iter_mut() {
        *v = ((*v - med) / noise / 4.0).asinh();
    }
    Tensor::new(vec![1, 1, h, w], r).expect("shape matches resized buffer")
}

/// Per-anchor `(dx, dy, dw, dh, logit)` in anchor order.
pub fn flatten_heads(outputs: &[Tensor], anchors_per_cell: usize) -> Result<Vec<[f64; 5]>> {
    let mut out = Vec::new();
    for t in outputs {
        let (n, c, fh, fw) = t.dims4()?;
        if n != 1 || c != anchors_per_cell * VALUES_PER_ANCHOR {
            return Err(Error::Internal(format!(
                "head output {:?} does not match {anchors_per_cell} anchors per cell",
                t.shape()
            )));
        }
        let p = fh * fw;
        let d = t.data();
        for cell in 0..p {
            for a in 0..anchors_per_cell {
                let base = a * VALUES_PER_ANCHOR * p + cell;
                let mut v = [0.0; 5];
                for (k, slot) in v.iter_mut().enumerate() {
                    *slot = d[base + k * p];
                }
                out.push(v);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`flatten_heads`]: scatter per-anchor values into head-shaped tensors.
pub fn unflatten_heads(
    values: &[[f64; 5]],
    shapes: &[Vec<usize>],
    anchors_per_cell: usize,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut k = 0;
    for s in shapes {
        let mut t = Tensor::zeros(s);
        let (_, _, fh, fw) = t.dims4()?;
        let p = fh * fw;
        let d = t.data_mut();
        for cell in 0..p {
            for a in 0..anchors_per_cell {
                let v = values
                    .get(k)
                    .ok_or_else(|| Error::Internal("fewer values than anchors".into()))?;
                let base = a * VALUES_PER_ANCHOR * p + cell;
                for (j, &x) in v.iter().enumerate() {
                    d[base + j * p] = x;
                }
                k += 1;
            }
        }
        out.push(t);
    }
    if k != values.len() {
        return Err(Error::Internal("more values than anchors".into()));
    }
    Ok(out)
}

/// Logits are clipped before the sigmoid so confidences stay strictly inside (0, 1).
pub const LOGIT_CLIP: f64 = 20.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Greedy NMS: keep the most confident box, drop every remaining box with
/// IoU >= `iou_threshold` against a kept one. Equal confidences keep input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Geometry needed to turn head outputs into detections on the original frame.
pub struct DecodeContext<'a> {
    pub anchors: &'a [BoundingBox],
    pub anchors_per_cell: usize,
    pub input_size: (usize, usize),
    pub frame_size: (usize, usize),
}

/// Threshold, decode, map back to frame pixels, clip, NMS.
pub fn postprocess(
    outputs: &[Tensor],
    ctx: &DecodeContext,
    confidence_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let preds = flatten_heads(outputs, ctx.anchors_per_cell)?;
    if preds.len() != ctx.anchors.len() {
        return Err(Error::Internal(format!(
            "{} predictions for {} anchors",
            preds.len(),
            ctx.anchors.len()
        )));
    }
    let (fw, fh) = ctx.frame_size;
    let sx = fw as f64 / ctx.input_size.1 as f64;
    let sy = fh as f64 / ctx.input_size.0 as f64;
    let mut dets = Vec::new();
    for (p, a) in preds.iter().zip(ctx.anchors) {
        let conf = sigmoid(p[4].clamp(-LOGIT_CLIP, LOGIT_CLIP));
        if !(conf >= confidence_threshold) {
            continue;
        }
        let b = decode_box(&[p[0], p[1], p[2], p[3]], a)
            .scale(sx, sy)
            .clamp_to(fw, fh);
        if b.is_valid() {
            dets.push(Detection {
                bbox: b,
                confidence: conf,
            });
        }
    }
    Ok(nms(&dets, nms_iou))
}

impl DetectorModel {
    pub fn decode_context(&self, frame_size: (usize, usize)) -> DecodeContext<'_> {
        DecodeContext {
            anchors: self.anchors(),
            anchors_per_cell: self.spec.anchor_config.anchors_per_cell(),
            input_size: self.spec.input_size,
            frame_size,
        }
    }
}

/// Float inference on one frame; detections sorted by descending confidence.
pub fn detect(
    model: &DetectorModel,
    image: &Gray16,
    confidence_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    if model.spec.precision != Precision::Float {
        return Err(Error::Precision(
            "float detect called with a quantized model spec".into(),
        ));
    }
    let x = preprocess(image, model.spec.input_size);
    let outs = model.forward(x)?;
    postprocess(
        &outs,
        &model.decode_context((image.width, image.height)),
        confidence_threshold,
        nms_iou,
    )
}
