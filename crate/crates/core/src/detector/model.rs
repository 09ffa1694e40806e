//! Backbone + SSD heads, model metadata and checkpoints.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use satdet_nn::container::{decode_params_into, encode_params};
use satdet_nn::{Grads, Layer, LayerSpec, ParamSet, Sequential, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::anchors::{build_anchors, AnchorConfig};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::scenegen::TrackingMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    Float,
    Quantized,
}

/// Logit bias at initialization: sigmoid(-4.6) ~ 0.01 keeps early loss from
/// being dominated by thousands of easy negatives.
pub const OBJECTNESS_PRIOR_BIAS: f64 = -4.6;

/// Values per anchor in a head's output channels: `dx, dy, dw, dh, logit`.
pub const VALUES_PER_ANCHOR: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub size_class: SizeClass,
    /// `(height, width)` of the network input.
    pub input_size: (usize, usize),
    pub anchor_config: AnchorConfig,
    pub tracking_mode: TrackingMode,
    pub precision: Precision,
}

impl ModelSpec {
    pub fn small(mode: TrackingMode) -> Self {
        Self {
            size_class: SizeClass::Small,
            input_size: (256, 256),
            anchor_config: AnchorConfig {
                feature_map_strides: vec![8, 16],
                anchor_scales_px: vec![vec![6.0, 12.0], vec![24.0, 48.0]],
                aspect_ratios: vec![1.0, 3.0, 1.0 / 3.0],
            },
            tracking_mode: mode,
            precision: Precision::Float,
        }
    }

    pub fn large(mode: TrackingMode) -> Self {
        Self {
            size_class: SizeClass::Large,
            input_size: (256, 256),
            anchor_config: AnchorConfig {
                feature_map_strides: vec![4, 8, 16],
                anchor_scales_px: vec![vec![4.0, 8.0], vec![12.0, 24.0], vec![32.0, 48.0]],
                aspect_ratios: vec![1.0, 3.0, 1.0 / 3.0],
            },
            tracking_mode: mode,
            precision: Precision::Float,
        }
    }

    pub fn for_size(size: SizeClass, mode: TrackingMode) -> Self {
        match size {
            SizeClass::Small => Self::small(mode),
            SizeClass::Large => Self::large(mode),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.anchor_config.validate()?;
        let arch = Arch::for_size(self.size_class);
        if self.anchor_config.feature_map_strides != arch.tap_strides() {
            return Err(Error::Config(format!(
                "{:?} model has heads at strides {:?}, anchor config lists {:?}",
                self.size_class,
                arch.tap_strides(),
                self.anchor_config.feature_map_strides
            )));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h > 4096 || w > 4096 {
            return Err(Error::Config(format!("input size {h}x{w} out of range")));
        }
        Ok(())
    }
}

/// Layer recipe of one size class.
struct Arch {
    stem: usize,
    /// `(out_channels, expansion, stride)` per inverted residual block.
    blocks: Vec<(usize, usize, usize)>,
    /// Blocks whose outputs feed a head.
    tap_blocks: Vec<usize>,
}

const BLOCK_OFFSET: usize = 3;

impl Arch {
    fn for_size(size: SizeClass) -> Self {
        match size {
            SizeClass::Small => Arch {
                stem: 16,
                blocks: vec![
                    (16, 4, 1),
                    (24, 4, 2),
                    (32, 4, 2),
                    (48, 4, 1),
                    (64, 4, 2),
                    (64, 4, 1),
                ],
                tap_blocks: vec![3, 5],
            },
            SizeClass::Large => Arch {
                stem: 32,
                blocks: vec![
                    (32, 6, 1),
                    (48, 6, 2),
                    (48, 6, 1),
                    (64, 6, 2),
                    (64, 6, 1),
                    (80, 6, 1),
                    (96, 6, 2),
                    (96, 6, 1),
                    (112, 6, 1),
                    (128, 6, 1),
                    (128, 6, 1),
                    (128, 6, 1),
                ],
                tap_blocks: vec![2, 5, 11],
            },
        }
    }

    fn tap_strides(&self) -> Vec<usize> {
        let mut stride = 2;
        let mut out = Vec::new();
        for (i, &(_, _, s)) in self.blocks.iter().enumerate() {
            stride *= s;
            if self.tap_blocks.contains(&i) {
                out.push(stride);
            }
        }
        out
    }

    fn tap_layers(&self) -> Vec<usize> {
        self.tap_blocks.iter().map(|b| b + BLOCK_OFFSET).collect()
    }

    fn tap_channels(&self) -> Vec<usize> {
        self.tap_blocks.iter().map(|&b| self.blocks[b].0).collect()
    }
}

/// Float detector: backbone, one 3x3 head per tapped feature map, and the anchor grid.
#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub spec: ModelSpec,
    pub params: ParamSet,
    backbone: Sequential,
    taps: Vec<usize>,
    heads: Vec<Sequential>,
    anchors: Vec<BoundingBox>,
}

/// Reverse-pass record of one [`DetectorModel::forward_train`] call.
pub struct DetectorTape {
    backbone: Tape,
    heads: Vec<Tape>,
}

impl DetectorModel {
    /// Fresh model with He-normal weights drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.precision != Precision::Float {
            return Err(Error::Precision(
                "a float detector cannot be built from a quantized spec".into(),
            ));
        }
        let arch = Arch::for_size(spec.size_class);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layers = vec![
            Layer::build(
                &LayerSpec::conv(1, arch.stem, 3, 2),
                &mut params,
                "stem",
                &mut rng,
            )?,
            Layer::build(
                &LayerSpec::batch_norm(arch.stem),
                &mut params,
                "stem_bn",
                &mut rng,
            )?,
            Layer::Relu6,
        ];
        let mut cin = arch.stem;
        for (i, &(cout, t, s)) in arch.blocks.iter().enumerate() {
            layers.push(Layer::build(
                &LayerSpec::inverted_residual(cin, cout, t, s),
                &mut params,
                &format!("block{i}"),
                &mut rng,
            )?);
            cin = cout;
        }
        let a = spec.anchor_config.anchors_per_cell();
        let mut heads = Vec::new();
        for (k, &c) in arch.tap_channels().iter().enumerate() {
            let name = format!("head{k}");
            let layer = Layer::build(
                &LayerSpec::conv(c, a * VALUES_PER_ANCHOR, 3, 1),
                &mut params,
                &name,
                &mut rng,
            )?;
            // Heads start small so initial box offsets are near zero.
            let wid = params.id(&format!("{name}.weight")).expect("just added");
            for v in params.get_mut(wid).data_mut() {
                *v *= 0.1;
            }
            let bid = params.id(&format!("{name}.bias")).expect("just added");
            let bias = params.get_mut(bid).data_mut();
            for j in 0..a {
                bias[j * VALUES_PER_ANCHOR + 4] = OBJECTNESS_PRIOR_BIAS;
            }
            heads.push(Sequential::new(vec![layer]));
        }
        let anchors = build_anchors(&spec.anchor_config, spec.input_size)?;
        Ok(Self {
            spec,
            params,
            backbone: Sequential::new(layers),
            taps: arch.tap_layers(),
            heads,
            anchors,
        })
    }

    pub fn anchors(&self) -> &[BoundingBox] {
        &self.anchors
    }

    pub fn backbone(&self) -> &Sequential {
        &self.backbone
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn heads(&self) -> &[Sequential] {
        &self.heads
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [1, 1, self.spec.input_size.0, self.spec.input_size.1]
    }

    /// Raw head outputs, one `[1, A*5, fh, fw]` tensor per feature map.
    pub fn forward(&self, x: Tensor) -> Result<Vec<Tensor>> {
        let feats = self.backbone.forward(&self.params, x, &self.taps, None)?;
        feats
            .into_iter()
            .zip(&self.heads)
            .map(|(f, h)| Ok(h.forward(&self.params, f, &[0], None)?.remove(0)))
            .collect()
    }

    pub fn forward_train(&self, x: Tensor) -> Result<(Vec<Tensor>, DetectorTape)> {
        let (feats, backbone) = self.backbone.forward_train(&self.params, x, &self.taps)?;
        let mut outs = Vec::with_capacity(feats.len());
        let mut heads = Vec::with_capacity(feats.len());
        for (f, h) in feats.into_iter().zip(&self.heads) {
            let (mut o, tape) = h.forward_train(&self.params, f, &[0])?;
            outs.push(o.remove(0));
            heads.push(tape);
        }
        Ok((outs, DetectorTape { backbone, heads }))
    }

    /// Accumulate parameter gradients given the loss gradient of every head output.
    pub fn backward(
        &self,
        tape: DetectorTape,
        head_grads: Vec<Tensor>,
        grads: &mut Grads,
    ) -> Result<()> {
        if head_grads.len() != self.heads.len() {
            return Err(Error::Internal(format!(
                "{} head gradients for {} heads",
                head_grads.len(),
                self.heads.len()
            )));
        }
        let mut tap_grads = Vec::with_capacity(self.heads.len());
        for ((h, t), g) in self.heads.iter().zip(tape.heads).zip(head_grads) {
            tap_grads.push(Some(h.backward(
                &self.params,
                t,
                &[0],
                vec![Some(g)],
                grads,
            )?));
        }
        self.backbone
            .backward(&self.params, tape.backbone, &self.taps, tap_grads, grads)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_sidecar(path, &Sidecar::model(&self.spec))?;
        std::fs::write(path, encode_params(&self.params)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = read_sidecar(path)?;
        if side.spec.precision != Precision::Float || side.quantization.is_some() {
            return Err(Error::Precision(format!(
                "{} holds a quantized model; load it with the quantized loader",
                path.display()
            )));
        }
        let mut model =
            Self::new(side.spec, 0).map_err(|e| Error::parse(sidecar_path(path), e.to_string()))?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_params_into(&bytes, &mut model.params)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(model)
    }
}

/// JSON metadata stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    pub spec: ModelSpec,
    /// Present for quantized checkpoints: per-tensor parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<serde_json::Value>,
}

pub const SIDECAR_FORMAT: &str = "satdet-checkpoint-v1";

impl Sidecar {
    pub fn model(spec: &ModelSpec) -> Self {
        Self {
            format: SIDECAR_FORMAT.into(),
            spec: spec.clone(),
            quantization: None,
        }
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let s: Sidecar = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if s.format != SIDECAR_FORMAT {
            return Err(format!("unknown sidecar format {:?}", s.format));
        }
        s.spec.validate().map_err(|e| e.to_string())?;
        Ok(s)
    }
}

/// `model.bin` -> `model.json`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn write_sidecar(checkpoint: &Path, side: &Sidecar) -> Result<()> {
    let p = sidecar_path(checkpoint);
    if p == checkpoint {
        return Err(Error::Config(format!(
            "checkpoint {} must not use the .json extension",
            checkpoint.display()
        )));
    }
    let text = serde_json::to_string_pretty(side).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
}

pub fn read_sidecar(checkpoint: &Path) -> Result<Sidecar> {
    let p = sidecar_path(checkpoint);
    if !checkpoint.exists() {
        return Err(Error::io(
            checkpoint,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Sidecar::parse(&text).map_err(|m| Error::parse(&p, m))
}
