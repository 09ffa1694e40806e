//! Layer graph with a reverse-pass tape.
//!
//! A [`Sequential`] stack runs each [`Layer`] in order. In training mode every
//! layer leaves a [`Cache`] on a [`Tape`]; [`Sequential::backward`] consumes
//! that tape (by value) and accumulates parameter gradients into [`Grads`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::{self, Padding};
use crate::error::{shape_err, NnError, Result};
use crate::params::{Grads, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    InvertedResidual,
    Relu6,
    /// Batch normalization folded into a learned per-channel affine.
    BatchNorm,
}

/// Declarative description of one layer, used to build it and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Inverted residual only.
    pub expansion: usize,
}

impl LayerSpec {
    pub fn conv(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            kernel: (k, k),
            stride,
            padding: Padding::Same,
            in_channels: cin,
            out_channels: cout,
            expansion: 1,
        }
    }

    pub fn depthwise(c: usize, k: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::DepthwiseConv2d,
            ..Self::conv(c, c, k, stride)
        }
    }

    pub fn batch_norm(c: usize) -> Self {
        Self {
            kind: LayerKind::BatchNorm,
            ..Self::conv(c, c, 1, 1)
        }
    }

    pub fn relu6(c: usize) -> Self {
        Self {
            kind: LayerKind::Relu6,
            ..Self::conv(c, c, 1, 1)
        }
    }

    pub fn inverted_residual(cin: usize, cout: usize, expansion: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::InvertedResidual,
            expansion,
            ..Self::conv(cin, cout, 3, stride)
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(NnError::InvalidArgument {
                op: "LayerSpec",
                msg,
            })
        };
        if !(self.stride == 1 || self.stride == 2) {
            return bad(format!("stride must be 1 or 2, got {}", self.stride));
        }
        if self.expansion < 1 {
            return bad("expansion factor must be >= 1".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineLayer {
    pub scale: ParamId,
    pub shift: ParamId,
}

/// MobileNetV2 bottleneck: 1×1 expand → ReLU6 → 3×3 depthwise → ReLU6 → 1×1
/// linear projection, plus an identity skip when shapes allow it.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedResidual {
    pub body: Vec<Layer>,
    pub skip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(ConvLayer),
    DepthwiseConv2d(ConvLayer),
    BatchNorm(AffineLayer),
    Relu6,
    InvertedResidual(InvertedResidual),
}

#[derive(Debug)]
pub enum Cache {
    Input(Tensor),
    Block(Vec<Cache>),
}

/// Cached activations from one training-mode forward pass.
#[derive(Debug)]
pub struct Tape {
    records: Vec<Cache>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
    t
}

impl Layer {
    /// Builds the layer, registering its parameters under `name.*`.
    pub fn build(
        spec: &LayerSpec,
        params: &mut ParamSet,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let (kh, kw) = spec.kernel;
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        Ok(match spec.kind {
            LayerKind::Conv2d => {
                let weight = params.add(
                    format!("{name}.weight"),
                    he_normal(rng, &[cout, cin, kh, kw], cin * kh * kw),
                )?;
                let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
                Layer::Conv2d(ConvLayer {
                    weight,
                    bias,
                    stride: spec.stride,
                    padding: spec.padding,
                })
            }
            LayerKind::DepthwiseConv2d => {
                if cin != cout {
                    return Err(shape_err("depthwise spec", &[cin], &[cout]));
                }
                let weight = params.add(
                    format!("{name}.weight"),
                    he_normal(rng, &[cin, 1, kh, kw], kh * kw),
                )?;
                let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[cin]))?;
                Layer::DepthwiseConv2d(ConvLayer {
                    weight,
                    bias,
                    stride: spec.stride,
                    padding: spec.padding,
                })
            }
            LayerKind::BatchNorm => {
                let scale = params.add(format!("{name}.scale"), Tensor::full(&[cout], 1.0))?;
                let shift = params.add(format!("{name}.shift"), Tensor::zeros(&[cout]))?;
                Layer::BatchNorm(AffineLayer { scale, shift })
            }
            LayerKind::Relu6 => Layer::Relu6,
            LayerKind::InvertedResidual => {
                let hidden = cin * spec.expansion;
                let mut body = Vec::new();
                if spec.expansion > 1 {
                    body.push(Layer::build(
                        &LayerSpec::conv(cin, hidden, 1, 1),
                        params,
                        &format!("{name}.expand"),
                        rng,
                    )?);
                    body.push(Layer::build(
                        &LayerSpec::batch_norm(hidden),
                        params,
                        &format!("{name}.expand_bn"),
                        rng,
                    )?);
                    body.push(Layer::Relu6);
                }
                body.push(Layer::build(
                    &LayerSpec::depthwise(hidden, kh, spec.stride),
                    params,
                    &format!("{name}.dw"),
                    rng,
                )?);
                body.push(Layer::build(
                    &LayerSpec::batch_norm(hidden),
                    params,
                    &format!("{name}.dw_bn"),
                    rng,
                )?);
                body.push(Layer::Relu6);
                body.push(Layer::build(
                    &LayerSpec::conv(hidden, cout, 1, 1),
                    params,
                    &format!("{name}.project"),
                    rng,
                )?);
                body.push(Layer::build(
                    &LayerSpec::batch_norm(cout),
                    params,
                    &format!("{name}.project_bn"),
                    rng,
                )?);
                Layer::InvertedResidual(InvertedResidual {
                    body,
                    skip: spec.stride == 1 && cin == cout,
                })
            }
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::DepthwiseConv2d(_) => LayerKind::DepthwiseConv2d,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu6 => LayerKind::Relu6,
            Layer::InvertedResidual(_) => LayerKind::InvertedResidual,
        }
    }

    fn forward(
        &self,
        params: &ParamSet,
        x: Tensor,
        record: bool,
        path: &mut Vec<usize>,
        observer: &mut Option<&mut dyn FnMut(&[usize], &Tensor)>,
    ) -> Result<(Tensor, Option<Cache>)> {
        let y = match self {
            Layer::Conv2d(c) => conv::conv2d_forward(
                &x,
                params.get(c.weight),
                Some(params.get(c.bias)),
                c.stride,
                c.padding,
            )?,
            Layer::DepthwiseConv2d(c) => conv::depthwise_conv2d_forward(
                &x,
                params.get(c.weight),
                Some(params.get(c.bias)),
                c.stride,
                c.padding,
            )?,
            Layer::BatchNorm(a) => affine_forward(&x, params.get(a.scale), params.get(a.shift))?,
            Layer::Relu6 => relu6_forward(&x),
            Layer::InvertedResidual(block) => {
                let skip_in = block.skip.then(|| x.clone());
                let mut caches = Vec::with_capacity(block.body.len());
                let mut h = x;
                for (i, layer) in block.body.iter().enumerate() {
                    path.push(i);
                    let (out, cache) = layer.forward(params, h, record, path, observer)?;
                    path.pop();
                    if let Some(c) = cache {
                        caches.push(c);
                    }
                    h = out;
                }
                if let Some(s) = skip_in {
                    h.add_assign(&s)?;
                }
                if let Some(obs) = observer.as_mut() {
                    obs(path, &h);
                }
                return Ok((h, record.then_some(Cache::Block(caches))));
            }
        };
        if let Some(obs) = observer.as_mut() {
            obs(path, &y);
        }
        Ok((y, record.then_some(Cache::Input(x))))
    }

    fn backward(
        &self,
        params: &ParamSet,
        cache: Cache,
        grad_out: Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let mismatch = || NnError::TapeMismatch(format!("cache does not fit {:?}", self.kind()));
        match (self, cache) {
            (Layer::Conv2d(c), Cache::Input(x)) => {
                let g = conv::conv2d_backward(
                    &x,
                    params.get(c.weight),
                    &grad_out,
                    c.stride,
                    c.padding,
                )?;
                grads.accumulate(c.weight, &g.weight)?;
                grads.accumulate(c.bias, &g.bias)?;
                Ok(g.input)
            }
            (Layer::DepthwiseConv2d(c), Cache::Input(x)) => {
                let g = conv::depthwise_conv2d_backward(
                    &x,
                    params.get(c.weight),
                    &grad_out,
                    c.stride,
                    c.padding,
                )?;
                grads.accumulate(c.weight, &g.weight)?;
                grads.accumulate(c.bias, &g.bias)?;
                Ok(g.input)
            }
            (Layer::BatchNorm(a), Cache::Input(x)) => {
                let (gx, gs, gb) = affine_backward(&x, params.get(a.scale), &grad_out)?;
                grads.accumulate(a.scale, &gs)?;
                grads.accumulate(a.shift, &gb)?;
                Ok(gx)
            }
            (Layer::Relu6, Cache::Input(x)) => relu6_backward(&x, &grad_out),
            (Layer::InvertedResidual(block), Cache::Block(caches)) => {
                if caches.len() != block.body.len() {
                    return Err(mismatch());
                }
                let skip_grad = block.skip.then(|| grad_out.clone());
                let mut g = grad_out;
                for (layer, cache) in block.body.iter().zip(caches).rev() {
                    g = layer.backward(params, cache, g, grads)?;
                }
                if let Some(s) = skip_grad {
                    g.add_assign(&s)?;
                }
                Ok(g)
            }
            _ => Err(mismatch()),
        }
    }
}

/// Ordered stack of layers with optional intermediate outputs ("taps").
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    fn check_taps(&self, taps: &[usize]) -> Result<()> {
        if taps.windows(2).any(|w| w[0] >= w[1]) || taps.iter().any(|&t| t >= self.layers.len()) {
            return Err(NnError::InvalidArgument {
                op: "Sequential",
                msg: format!(
                    "taps {taps:?} must be strictly increasing layer indices below {}",
                    self.layers.len()
                ),
            });
        }
        Ok(())
    }

    fn run(
        &self,
        params: &ParamSet,
        x: Tensor,
        taps: &[usize],
        record: bool,
        mut observer: Option<&mut dyn FnMut(&[usize], &Tensor)>,
    ) -> Result<(Vec<Tensor>, Option<Tape>)> {
        self.check_taps(taps)?;
        let last = taps.last().copied().unwrap_or(0);
        let mut outs = Vec::with_capacity(taps.len());
        let mut records = Vec::new();
        let mut h = x;
        let mut path = Vec::with_capacity(4);
        for (i, layer) in self.layers.iter().enumerate().take(last + 1) {
            path.clear();
            path.push(i);
            let (y, cache) = layer.forward(params, h, record, &mut path, &mut observer)?;
            if let Some(c) = cache {
                records.push(c);
            }
            h = y;
            if taps.contains(&i) {
                if i == last {
                    outs.push(h);
                    break;
                }
                outs.push(h.clone());
            }
        }
        Ok((outs, record.then_some(Tape { records })))
    }

    /// Inference forward pass returning the outputs of the layers listed in
    /// `taps`. The observer, if given, sees every primitive layer output keyed
    /// by its path (`[layer]` or `[layer, sublayer]`).
    pub fn forward(
        &self,
        params: &ParamSet,
        x: Tensor,
        taps: &[usize],
        observer: Option<&mut dyn FnMut(&[usize], &Tensor)>,
    ) -> Result<Vec<Tensor>> {
        Ok(self.run(params, x, taps, false, observer)?.0)
    }

    /// Training forward pass; returns tap outputs and the tape for [`Self::backward`].
    pub fn forward_train(
        &self,
        params: &ParamSet,
        x: Tensor,
        taps: &[usize],
    ) -> Result<(Vec<Tensor>, Tape)> {
        let (outs, tape) = self.run(params, x, taps, true, None)?;
        Ok((outs, tape.expect("recording enabled")))
    }

    /// Reverse pass. `tap_grads[i]` is the loss gradient w.r.t. the output at
    /// `taps[i]` (`None` for zero). Returns the gradient w.r.t. the input.
    pub fn backward(
        &self,
        params: &ParamSet,
        tape: Tape,
        taps: &[usize],
        tap_grads: Vec<Option<Tensor>>,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        self.check_taps(taps)?;
        if tap_grads.len() != taps.len() {
            return Err(NnError::TapeMismatch(format!(
                "{} tap gradients for {} taps",
                tap_grads.len(),
                taps.len()
            )));
        }
        let depth = taps.last().map_or(0, |&t| t + 1);
        if tape.records.len() != depth {
            return Err(NnError::TapeMismatch(format!(
                "tape holds {} records, network depth is {depth}",
                tape.records.len()
            )));
        }
        let mut pending: Vec<Option<Tensor>> = tap_grads;
        let mut g: Option<Tensor> = None;
        for (i, cache) in tape.records.into_iter().enumerate().rev() {
            if let Some(k) = taps.iter().position(|&t| t == i) {
                if let Some(tg) = pending[k].take() {
                    g = Some(match g {
                        Some(mut acc) => {
                            acc.add_assign(&tg)?;
                            acc
                        }
                        None => tg,
                    });
                }
            }
            let upstream = match g.take() {
                Some(t) => t,
                // The output shape is not stored on the tape; recompute it.
                None => self.zero_output_like(params, i, &cache)?,
            };
            g = Some(self.layers[i].backward(params, cache, upstream, grads)?);
        }
        g.ok_or_else(|| NnError::TapeMismatch("empty tape".into()))
    }

    fn zero_output_like(&self, params: &ParamSet, i: usize, cache: &Cache) -> Result<Tensor> {
        let input = match cache {
            Cache::Input(x) => x.clone(),
            Cache::Block(c) => match c.first() {
                Some(Cache::Input(x)) => x.clone(),
                _ => return Err(NnError::TapeMismatch("malformed block cache".into())),
            },
        };
        let (out, _) = self.layers[i].forward(params, input, false, &mut vec![i], &mut None)?;
        Ok(Tensor::zeros(out.shape()))
    }
}

/// `min(max(x, 0), 6)` elementwise.
pub fn relu6_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 6.0))
}

pub fn relu6_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(shape_err("relu6_backward", x.shape(), grad_out.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 && v < 6.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Per-channel `x * scale[c] + shift[c]` on an NCHW tensor.
pub fn affine_forward(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(shape_err("affine", &[c], scale.shape()));
    }
    let mut y = x.clone();
    let hw = h * w;
    for b in 0..n {
        for ch in 0..c {
            let (s, t) = (scale.data()[ch], shift.data()[ch]);
            for v in &mut y.data_mut()[(b * c + ch) * hw..][..hw] {
                *v = *v * s + t;
            }
        }
    }
    Ok(y)
}

pub fn affine_backward(
    x: &Tensor,
    scale: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    if grad_out.shape() != x.shape() {
        return Err(shape_err("affine_backward", x.shape(), grad_out.shape()));
    }
    let hw = h * w;
    let mut gx = grad_out.clone();
    let mut gs = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let s = scale.data()[ch];
            let xs = &x.data()[off..off + hw];
            for (gv, &xv) in gx.data_mut()[off..off + hw].iter_mut().zip(xs) {
                gs[ch] += *gv * xv;
                gb[ch] += *gv;
                *gv *= s;
            }
        }
    }
    Ok((gx, Tensor::new(vec![c], gs)?, Tensor::new(vec![c], gb)?))
}
