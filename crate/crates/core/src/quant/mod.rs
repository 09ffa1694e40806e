//! Post-training int8 quantization: BN folding, min/max calibration, and an
//! integer inference path with i32 accumulation.

use std::path::Path;

mod kernels;

pub use kernels::QTensor;
use kernels::{residual_add, run_conv};

use satdet_nn::container::{decode, encode, NamedTensor, TensorData};
use satdet_nn::{conv2d_forward, depthwise_conv2d_forward, Layer, Padding, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::detector::infer::{postprocess, preprocess, DecodeContext};
use crate::detector::model::{read_sidecar, sidecar_path, write_sidecar, Precision, Sidecar};
use crate::detector::{build_anchors, DetectorModel, ModelSpec};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Detection};
use crate::raster::Gray16;

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;
/// Scale used when a tensor's range collapses to a single value.
pub const DEGENERATE_SCALE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    /// Asymmetric parameters covering `[min, max]` widened to include zero.
    pub fn from_range(min: f64, max: f64) -> Self {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let span = hi - lo;
        if !(span > 0.0) || !span.is_finite() {
            return Self {
                scale: DEGENERATE_SCALE,
                zero_point: 0,
            };
        }
        let scale = span / (QMAX - QMIN) as f64;
        let zero_point = (QMIN as f64 - lo / scale)
            .round()
            .clamp(QMIN as f64, QMAX as f64) as i32;
        Self { scale, zero_point }
    }

    /// Symmetric (zero point 0) parameters for weights.
    pub fn symmetric(values: &[f64]) -> Self {
        let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Self {
            scale: if m > 0.0 {
                m / QMAX as f64
            } else {
                DEGENERATE_SCALE
            },
            zero_point: 0,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(format!("scale {} must be positive", self.scale));
        }
        if !(QMIN..=QMAX).contains(&self.zero_point) {
            return Err(format!(
                "zero point {} outside [-128, 127]",
                self.zero_point
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn quantize(&self, v: f64) -> i8 {
        let q = (v / self.scale).round() + self.zero_point as f64;
        q.clamp(QMIN as f64, QMAX as f64) as i8
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f64 {
        (q as i32 - self.zero_point) as f64 * self.scale
    }
}

pub fn quantize_tensor(values: &[f64], q: QuantParams) -> Vec<i8> {
    values.iter().map(|&v| q.quantize(v)).collect()
}

pub fn dequantize_tensor(payload: &[i8], q: QuantParams) -> Vec<f64> {
    payload.iter().map(|&v| q.dequantize(v)).collect()
}

// ---------------------------------------------------------------------------
// Folded float graph

/// Convolution with any following affine folded in, optionally clamped by ReLU6.
#[derive(Clone, Debug)]
struct FConv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: Padding,
    depthwise: bool,
    relu6: bool,
    /// Activation boundary written by this op.
    out_id: usize,
}

#[derive(Clone, Debug)]
enum FOp {
    Conv(FConv),
    /// Inverted residual: convs in order, then the skip sum's boundary if any.
    Block {
        convs: Vec<FConv>,
        add_id: Option<usize>,
    },
}

/// Float model with batch-norm folded into convolutions. Boundary 0 is the input.
#[derive(Clone, Debug)]
struct FoldedGraph {
    backbone: Vec<FOp>,
    taps: Vec<usize>,
    heads: Vec<FConv>,
    boundaries: usize,
}

struct Folder<'a> {
    params: &'a ParamSet,
    next_id: usize,
}

impl Folder<'_> {
    /// Fold a run of primitive layers (conv, optional affine, optional ReLU6)
    /// starting at `layers[i]`; returns the op and the number of layers used.
    fn conv_group(&mut self, layers: &[Layer], i: usize) -> Result<(FConv, usize)> {
        let (c, depthwise) = match &layers[i] {
            Layer::Conv2d(c) => (c, false),
            Layer::DepthwiseConv2d(c) => (c, true),
            other => {
                return Err(Error::Internal(format!(
                    "cannot quantize a {:?} that does not follow a convolution",
                    other.kind()
                )))
            }
        };
        let mut weight = self.params.get(c.weight).clone();
        let mut bias = self.params.get(c.bias).clone();
        let mut used = 1;
        if let Some(Layer::BatchNorm(a)) = layers.get(i + 1) {
            let scale = self.params.get(a.scale).data();
            let shift = self.params.get(a.shift).data();
            let per = weight.len() / scale.len();
            for (o, chunk) in weight.data_mut().chunks_mut(per).enumerate() {
                chunk.iter_mut().for_each(|w| *w *= scale[o]);
            }
            for (o, b) in bias.data_mut().iter_mut().enumerate() {
                *b = *b * scale[o] + shift[o];
            }
            used += 1;
        }
        let relu6 = matches!(layers.get(i + used), Some(Layer::Relu6));
        if relu6 {
            used += 1;
        }
        let out_id = self.next_id;
        self.next_id += 1;
        Ok((
            FConv {
                weight,
                bias,
                stride: c.stride,
                padding: c.padding,
                depthwise,
                relu6,
                out_id,
            },
            used,
        ))
    }

    fn convs(&mut self, layers: &[Layer]) -> Result<Vec<(FConv, usize)>> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < layers.len() {
            let (c, used) = self.conv_group(layers, i)?;
            i += used;
            out.push((c, i - 1));
        }
        Ok(out)
    }
}

impl FoldedGraph {
    fn from_model(model: &DetectorModel) -> Result<Self> {
        let mut f = Folder {
            params: &model.params,
            next_id: 1,
        };
        let layers = &model.backbone().layers;
        let mut backbone = Vec::new();
        let mut last_layer = Vec::new();
        let mut i = 0;
        while i < layers.len() {
            if let Layer::InvertedResidual(b) = &layers[i] {
                let convs: Vec<FConv> = f.convs(&b.body)?.into_iter().map(|(c, _)| c).collect();
                let add_id = b.skip.then(|| {
                    f.next_id += 1;
                    f.next_id - 1
                });
                backbone.push(FOp::Block { convs, add_id });
                last_layer.push(i);
                i += 1;
            } else {
                let (c, used) = f.conv_group(layers, i)?;
                i += used;
                backbone.push(FOp::Conv(c));
                last_layer.push(i - 1);
            }
        }
        let taps = model
            .taps()
            .iter()
            .map(|t| {
                last_layer.iter().position(|l| l == t).ok_or_else(|| {
                    Error::Internal(format!("tap at layer {t} falls inside a fused group"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut heads = Vec::new();
        for h in model.heads() {
            let mut g = f.convs(&h.layers)?;
            if g.len() != 1 {
                return Err(Error::Internal("heads must be a single convolution".into()));
            }
            heads.push(g.remove(0).0);
        }
        Ok(Self {
            backbone,
            taps,
            heads,
            boundaries: f.next_id,
        })
    }

    fn conv(c: &FConv, x: &Tensor) -> Result<Tensor> {
        let mut y = if c.depthwise {
            depthwise_conv2d_forward(x, &c.weight, Some(&c.bias), c.stride, c.padding)?
        } else {
            conv2d_forward(x, &c.weight, Some(&c.bias), c.stride, c.padding)?
        };
        if c.relu6 {
            y.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0));
        }
        Ok(y)
    }

    /// Float forward over the folded graph; `seen` receives every boundary.
    fn forward(&self, x: Tensor, seen: &mut dyn FnMut(usize, &Tensor)) -> Result<Vec<Tensor>> {
        seen(0, &x);
        let mut h = x;
        let mut feats = Vec::new();
        for (k, op) in self.backbone.iter().enumerate() {
            h = match op {
                FOp::Conv(c) => {
                    let y = Self::conv(c, &h)?;
                    seen(c.out_id, &y);
                    y
                }
                FOp::Block { convs, add_id } => {
                    let mut y = Self::conv(&convs[0], &h)?;
                    seen(convs[0].out_id, &y);
                    for c in &convs[1..] {
                        y = Self::conv(c, &y)?;
                        seen(c.out_id, &y);
                    }
                    if let Some(id) = add_id {
                        y.add_assign(&h)?;
                        seen(*id, &y);
                    }
                    y
                }
            };
            if self.taps.contains(&k) {
                feats.push(h.clone());
            }
        }
        feats
            .iter()
            .zip(&self.heads)
            .map(|(f, c)| {
                let y = Self::conv(c, f)?;
                seen(c.out_id, &y);
                Ok(y)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `(min, max)` per activation boundary, input first.
    pub ranges: Vec<(f64, f64)>,
    pub frames: usize,
}

/// Running min/max of every activation boundary over `frames`.
pub fn calibrate(model: &DetectorModel, frames: &[Gray16]) -> Result<Calibration> {
    if frames.is_empty() {
        return Err(Error::Data("calibration needs at least one frame".into()));
    }
    let g = FoldedGraph::from_model(model)?;
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); g.boundaries];
    for f in frames {
        let x = preprocess(f, model.spec.input_size);
        g.forward(x, &mut |id, t| {
            let r = &mut ranges[id];
            for &v in t.data() {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        })?;
    }
    Ok(Calibration {
        ranges,
        frames: frames.len(),
    })
}

// ---------------------------------------------------------------------------
// Quantized model

#[derive(Clone, Debug, PartialEq)]
pub struct QConv {
    /// `[out, in, kh, kw]`, or `[c, 1, kh, kw]` when depthwise.
    pub weight_shape: [usize; 4],
    pub weight: Vec<i8>,
    pub weight_scale: f64,
    /// Scale `input.scale * weight_scale`, zero point 0.
    pub bias: Vec<i32>,
    pub stride: usize,
    pub same_padding: bool,
    pub depthwise: bool,
    pub relu6: bool,
    pub input: QuantParams,
    pub output: QuantParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAdd {
    pub a: QuantParams,
    pub b: QuantParams,
    pub output: QuantParams,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QOp {
    Conv(QConv),
    Block {
        convs: Vec<QConv>,
        add: Option<QAdd>,
    },
}

#[derive(Clone, Debug)]
pub struct QuantizedModel {
    /// Same as the source model's spec with `precision = Quantized`.
    pub spec: ModelSpec,
    pub input: QuantParams,
    pub backbone: Vec<QOp>,
    pub taps: Vec<usize>,
    pub heads: Vec<QConv>,
    anchors: Vec<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub shape: Vec<usize>,
    pub scale: f64,
    pub max_abs_error: f64,
    /// Signal-to-quantization-noise ratio in dB; `None` when the error is exactly zero.
    pub snr_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConversionReport {
    pub tensors: Vec<TensorReport>,
    pub calibration_frames: usize,
}

fn quantize_conv(
    c: &FConv,
    input: QuantParams,
    output: QuantParams,
    name: String,
    report: &mut Vec<TensorReport>,
) -> Result<QConv> {
    let shape = c.weight.shape();
    let weight_shape = [shape[0], shape[1], shape[2], shape[3]];
    let wq = QuantParams::symmetric(c.weight.data());
    let weight = quantize_tensor(c.weight.data(), wq);
    let mut err2 = 0.0;
    let mut sig2 = 0.0;
    let mut max_err = 0.0f64;
    for (&w, &q) in c.weight.data().iter().zip(&weight) {
        let e = w - wq.dequantize(q);
        err2 += e * e;
        sig2 += w * w;
        max_err = max_err.max(e.abs());
    }
    report.push(TensorReport {
        name,
        shape: shape.to_vec(),
        scale: wq.scale,
        max_abs_error: max_err,
        snr_db: (err2 > 0.0).then(|| 10.0 * (sig2 / err2).log10()),
    });
    let bias_scale = input.scale * wq.scale;
    let bias = c
        .bias
        .data()
        .iter()
        .map(|&b| {
            (b / bias_scale)
                .round()
                .clamp(i32::MIN as f64, i32::MAX as f64) as i32
        })
        .collect();
    Ok(QConv {
        weight_shape,
        weight,
        weight_scale: wq.scale,
        bias,
        stride: c.stride,
        same_padding: c.padding == Padding::Same,
        depthwise: c.depthwise,
        relu6: c.relu6,
        input,
        output,
    })
}

/// Per-tensor int8 conversion of a calibrated float model.
pub fn convert_model(
    model: &DetectorModel,
    calib: &Calibration,
) -> Result<(QuantizedModel, ConversionReport)> {
    let g = FoldedGraph::from_model(model)?;
    if calib.ranges.len() != g.boundaries {
        return Err(Error::Data(format!(
            "calibration covers {} activation tensors, model has {}",
            calib.ranges.len(),
            g.boundaries
        )));
    }
    if let Some(i) = calib
        .ranges
        .iter()
        .position(|r| !(r.0.is_finite() && r.1.is_finite() && r.0 <= r.1))
    {
        return Err(Error::Data(format!(
            "activation tensor {i} has no calibrated range"
        )));
    }
    let q = |id: usize| QuantParams::from_range(calib.ranges[id].0, calib.ranges[id].1);
    let mut tensors = Vec::new();
    let mut backbone = Vec::with_capacity(g.backbone.len());
    let mut cur = q(0);
    for (k, op) in g.backbone.iter().enumerate() {
        match op {
            FOp::Conv(c) => {
                let qc = quantize_conv(c, cur, q(c.out_id), format!("op{k}"), &mut tensors)?;
                cur = qc.output;
                backbone.push(QOp::Conv(qc));
            }
            FOp::Block { convs, add_id } => {
                let block_in = cur;
                let mut qs = Vec::with_capacity(convs.len());
                for (j, c) in convs.iter().enumerate() {
                    let qc =
                        quantize_conv(c, cur, q(c.out_id), format!("op{k}.{j}"), &mut tensors)?;
                    cur = qc.output;
                    qs.push(qc);
                }
                let add = add_id.map(|id| QAdd {
                    a: block_in,
                    b: cur,
                    output: q(id),
                });
                if let Some(a) = &add {
                    cur = a.output;
                }
                backbone.push(QOp::Block { convs: qs, add });
            }
        }
    }
    // Each head reads the output boundary of its tapped op.
    let tap_out: Vec<QuantParams> = g
        .taps
        .iter()
        .map(|&t| match &backbone[t] {
            QOp::Conv(c) => c.output,
            QOp::Block { convs, add } => add
                .as_ref()
                .map_or(convs[convs.len() - 1].output, |a| a.output),
        })
        .collect();
    let heads = g
        .heads
        .iter()
        .zip(tap_out)
        .enumerate()
        .map(|(k, (c, inq))| quantize_conv(c, inq, q(c.out_id), format!("head{k}"), &mut tensors))
        .collect::<Result<Vec<_>>>()?;
    let mut spec = model.spec.clone();
    spec.precision = Precision::Quantized;
    Ok((
        QuantizedModel {
            spec,
            input: q(0),
            backbone,
            taps: g.taps,
            heads,
            anchors: model.anchors().to_vec(),
        },
        ConversionReport {
            tensors,
            calibration_frames: calib.frames,
        },
    ))
}

impl QuantizedModel {
    pub fn anchors(&self) -> &[BoundingBox] {
        &self.anchors
    }

    /// Integer forward pass; head outputs are dequantized for decoding.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        let mut cur = QTensor {
            c,
            h,
            w,
            data: quantize_tensor(x.data(), self.input),
            q: self.input,
        };
        let mut feats = Vec::with_capacity(self.taps.len());
        for (k, op) in self.backbone.iter().enumerate() {
            cur = match op {
                QOp::Conv(c) => run_conv(&cur, c)?,
                QOp::Block { convs, add } => {
                    let mut y = run_conv(&cur, &convs[0])?;
                    for c in &convs[1..] {
                        y = run_conv(&y, c)?;
                    }
                    match add {
                        Some(a) => residual_add(&cur, &y, a)?,
                        None => y,
                    }
                }
            };
            if self.taps.contains(&k) {
                feats.push(cur.clone());
            }
        }
        feats
            .iter()
            .zip(&self.heads)
            .map(|(f, c)| {
                let y = run_conv(f, c)?;
                Ok(Tensor::new(
                    vec![1, y.c, y.h, y.w],
                    dequantize_tensor(&y.data, y.q),
                )?)
            })
            .collect()
    }

    pub fn decode_context(&self, frame_size: (usize, usize)) -> DecodeContext<'_> {
        DecodeContext {
            anchors: &self.anchors,
            anchors_per_cell: self.spec.anchor_config.anchors_per_cell(),
            input_size: self.spec.input_size,
            frame_size,
        }
    }

    fn all_convs(&self) -> Vec<(String, &QConv)> {
        let mut out = Vec::new();
        for (k, op) in self.backbone.iter().enumerate() {
            match op {
                QOp::Conv(c) => out.push((format!("op{k}"), c)),
                QOp::Block { convs, .. } => {
                    for (j, c) in convs.iter().enumerate() {
                        out.push((format!("op{k}.{j}"), c));
                    }
                }
            }
        }
        for (k, c) in self.heads.iter().enumerate() {
            out.push((format!("head{k}"), c));
        }
        out
    }

    /// Layer count and weight shapes, for comparing against the float model.
    pub fn conv_shapes(&self) -> Vec<[usize; 4]> {
        self.all_convs()
            .iter()
            .map(|(_, c)| c.weight_shape)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = QuantMeta::from_model(self);
        let side = Sidecar {
            format: crate::detector::model::SIDECAR_FORMAT.into(),
            spec: self.spec.clone(),
            quantization: Some(
                serde_json::to_value(&meta).map_err(|e| Error::Internal(e.to_string()))?,
            ),
        };
        write_sidecar(path, &side)?;
        let mut tensors = Vec::new();
        for (name, c) in self.all_convs() {
            tensors.push(NamedTensor {
                name: format!("{name}.weight"),
                shape: c.weight_shape.to_vec(),
                data: TensorData::I8(c.weight.clone()),
            });
            tensors.push(NamedTensor {
                name: format!("{name}.bias"),
                shape: vec![c.bias.len()],
                data: TensorData::I32(c.bias.clone()),
            });
        }
        std::fs::write(path, encode(&tensors)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = read_sidecar(path)?;
        let sp = sidecar_path(path);
        if side.spec.precision != Precision::Quantized {
            return Err(Error::Precision(format!(
                "{} holds a float model; load it with the float loader",
                path.display()
            )));
        }
        let meta: QuantMeta = side
            .quantization
            .clone()
            .ok_or_else(|| Error::parse(&sp, "missing `quantization` section"))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::parse(&sp, e.to_string()))
            })?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors = decode(&bytes).map_err(|e| Error::parse(path, e.to_string()))?;
        meta.into_model(side.spec, tensors)
            .map_err(|m| Error::parse(path, m))
    }
}

/// Quantized inference on one frame.
pub fn detect_quantized(
    model: &QuantizedModel,
    image: &Gray16,
    confidence_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    if model.spec.precision != Precision::Quantized {
        return Err(Error::Precision(
            "quantized detect called with a float model spec".into(),
        ));
    }
    let x = preprocess(image, model.spec.input_size);
    let outs = model.forward(&x)?;
    postprocess(
        &outs,
        &model.decode_context((image.width, image.height)),
        confidence_threshold,
        nms_iou,
    )
}

// ---------------------------------------------------------------------------
// Sidecar metadata

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QConvMeta {
    name: String,
    weight_shape: [usize; 4],
    weight_scale: f64,
    stride: usize,
    same_padding: bool,
    depthwise: bool,
    relu6: bool,
    input: QuantParams,
    output: QuantParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
enum QOpMeta {
    Conv(QConvMeta),
    Block {
        convs: Vec<QConvMeta>,
        add: Option<QAdd>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantMeta {
    input: QuantParams,
    backbone: Vec<QOpMeta>,
    taps: Vec<usize>,
    heads: Vec<QConvMeta>,
}

impl QConvMeta {
    fn of(name: String, c: &QConv) -> Self {
        Self {
            name,
            weight_shape: c.weight_shape,
            weight_scale: c.weight_scale,
            stride: c.stride,
            same_padding: c.same_padding,
            depthwise: c.depthwise,
            relu6: c.relu6,
            input: c.input,
            output: c.output,
        }
    }

    fn build(
        &self,
        tensors: &mut std::collections::HashMap<String, NamedTensor>,
    ) -> std::result::Result<QConv, String> {
        for q in [self.input, self.output] {
            q.validate().map_err(|e| format!("{}: {e}", self.name))?;
        }
        if !(self.weight_scale.is_finite() && self.weight_scale > 0.0) {
            return Err(format!("{}: weight scale must be positive", self.name));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(format!("{}: stride {} unsupported", self.name, self.stride));
        }
        let [co, ci, kh, kw] = self.weight_shape;
        if co == 0 || ci == 0 || kh == 0 || kw == 0 || (self.depthwise && ci != 1) {
            return Err(format!(
                "{}: invalid weight shape {:?}",
                self.name, self.weight_shape
            ));
        }
        let mut take = |suffix: &str| {
            tensors
                .remove(&format!("{}.{suffix}", self.name))
                .ok_or_else(|| format!("container lacks {}.{suffix}", self.name))
        };
        let w = take("weight")?;
        let b = take("bias")?;
        if w.shape != self.weight_shape {
            return Err(format!(
                "{}.weight: shape {:?}, sidecar says {:?}",
                self.name, w.shape, self.weight_shape
            ));
        }
        if b.shape != [co] {
            return Err(format!(
                "{}.bias: shape {:?}, expected [{co}]",
                self.name, b.shape
            ));
        }
        Ok(QConv {
            weight_shape: self.weight_shape,
            weight: w.as_i8().map_err(|e| e.to_string())?.to_vec(),
            weight_scale: self.weight_scale,
            bias: b.as_i32().map_err(|e| e.to_string())?.to_vec(),
            stride: self.stride,
            same_padding: self.same_padding,
            depthwise: self.depthwise,
            relu6: self.relu6,
            input: self.input,
            output: self.output,
        })
    }
}

impl QuantMeta {
    fn from_model(m: &QuantizedModel) -> Self {
        let backbone = m
            .backbone
            .iter()
            .enumerate()
            .map(|(k, op)| match op {
                QOp::Conv(c) => QOpMeta::Conv(QConvMeta::of(format!("op{k}"), c)),
                QOp::Block { convs, add } => QOpMeta::Block {
                    convs: convs
                        .iter()
                        .enumerate()
                        .map(|(j, c)| QConvMeta::of(format!("op{k}.{j}"), c))
                        .collect(),
                    add: add.clone(),
                },
            })
            .collect();
        Self {
            input: m.input,
            backbone,
            taps: m.taps.clone(),
            heads: m
                .heads
                .iter()
                .enumerate()
                .map(|(k, c)| QConvMeta::of(format!("head{k}"), c))
                .collect(),
        }
    }

    fn into_model(
        self,
        spec: ModelSpec,
        tensors: Vec<NamedTensor>,
    ) -> std::result::Result<QuantizedModel, String> {
        self.input.validate().map_err(|e| format!("input: {e}"))?;
        let mut map: std::collections::HashMap<String, NamedTensor> =
            tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut backbone = Vec::new();
        for op in &self.backbone {
            backbone.push(match op {
                QOpMeta::Conv(c) => QOp::Conv(c.build(&mut map)?),
                QOpMeta::Block { convs, add } => {
                    if convs.is_empty() {
                        return Err("block without convolutions".into());
                    }
                    if let Some(a) = add {
                        for q in [a.a, a.b, a.output] {
                            q.validate()?;
                        }
                    }
                    QOp::Block {
                        convs: convs
                            .iter()
                            .map(|c| c.build(&mut map))
                            .collect::<std::result::Result<_, _>>()?,
                        add: add.clone(),
                    }
                }
            });
        }
        if self.taps.len() != self.heads.len()
            || self.taps.iter().any(|&t| t >= backbone.len())
            || self.taps.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(format!(
                "taps {:?} do not fit {} ops / {} heads",
                self.taps,
                backbone.len(),
                self.heads.len()
            ));
        }
        let heads = self
            .heads
            .iter()
            .map(|c| c.build(&mut map))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if let Some(extra) = map.keys().next() {
            return Err(format!("unexpected tensor {extra:?} in container"));
        }
        let anchors =
            build_anchors(&spec.anchor_config, spec.input_size).map_err(|e| e.to_string())?;
        let a = spec.anchor_config.anchors_per_cell();
        if heads.iter().any(|h| h.weight_shape[0] != a * 5) {
            return Err("head width does not match the anchor configuration".into());
        }
        Ok(QuantizedModel {
            spec,
            input: self.input,
            backbone,
            taps: self.taps,
            heads,
            anchors,
        })
    }
}

/// Parse a quantized sidecar plus container without touching the filesystem.
pub fn parse_quantized(
    sidecar_json: &str,
    container: &[u8],
) -> std::result::Result<QuantizedModel, String> {
    let side = Sidecar::parse(sidecar_json)?;
    if side.spec.precision != Precision::Quantized {
        return Err("sidecar describes a float model".into());
    }
    let meta: QuantMeta =
        serde_json::from_value(side.quantization.ok_or("missing `quantization` section")?)
            .map_err(|e| e.to_string())?;
    let tensors = decode(container).map_err(|e| e.to_string())?;
    meta.into_model(side.spec, tensors)
}

/// Float forward through the folded graph; used to check folding against the original model.
pub fn folded_forward(model: &DetectorModel, x: Tensor) -> Result<Vec<Tensor>> {
    FoldedGraph::from_model(model)?.forward(x, &mut |_, _| {})
}

/// Weight shapes of every convolution in the float model, heads last.
pub fn float_conv_shapes(model: &DetectorModel) -> Vec<[usize; 4]> {
    fn walk(seq: &[Layer], params: &ParamSet, out: &mut Vec<[usize; 4]>) {
        for l in seq {
            match l {
                Layer::Conv2d(c) | Layer::DepthwiseConv2d(c) => {
                    let s = params.get(c.weight).shape();
                    out.push([s[0], s[1], s[2], s[3]]);
                }
                Layer::InvertedResidual(b) => walk(&b.body, params, out),
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    walk(&model.backbone().layers, &model.params, &mut out);
    for h in model.heads() {
        walk(&h.layers, &model.params, &mut out);
    }
    out
}

/// A checkpoint of either precision, chosen by its sidecar.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Float(DetectorModel),
    Quantized(QuantizedModel),
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<Self> {
        match read_sidecar(path)?.spec.precision {
            Precision::Float => DetectorModel::load(path).map(AnyModel::Float),
            Precision::Quantized => QuantizedModel::load(path).map(AnyModel::Quantized),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        match self {
            AnyModel::Float(m) => &m.spec,
            AnyModel::Quantized(m) => &m.spec,
        }
    }

    pub fn detect(
        &self,
        image: &Gray16,
        confidence_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<Detection>> {
        match self {
            AnyModel::Float(m) => crate::detector::detect(m, image, confidence_threshold, nms_iou),
            AnyModel::Quantized(m) => detect_quantized(m, image, confidence_threshold, nms_iou),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_maps_to_zero_point() {
        for (lo, hi) in [(-1.0, 3.0), (0.0, 6.0), (-5.0, -1.0), (2.0, 9.0)] {
            let q = QuantParams::from_range(lo, hi);
            assert_eq!(q.quantize(0.0) as i32, q.zero_point);
        }
    }

    #[test]
    fn relu6_range_scale() {
        let q = QuantParams::from_range(0.0, 6.0);
        assert!((q.scale - 6.0 / 255.0).abs() < 1e-15);
        assert_eq!(q.zero_point, -128);
        assert_eq!(q.quantize(6.0), 127);
    }

    #[test]
    fn degenerate_range_uses_fallback_scale() {
        let q = QuantParams::from_range(0.0, 0.0);
        assert_eq!(q.scale, DEGENERATE_SCALE);
        let w = QuantParams::symmetric(&[0.0; 5]);
        assert_eq!(w.scale, DEGENERATE_SCALE);
        assert_eq!(quantize_tensor(&[0.0; 5], w), vec![0; 5]);
    }

    #[test]
    fn every_code_round_trips() {
        let q = QuantParams::from_range(-0.7, 2.3);
        for code in QMIN..=QMAX {
            assert_eq!(q.quantize(q.dequantize(code as i8)) as i32, code);
        }
    }
}
