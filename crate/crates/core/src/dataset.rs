//! Annotation manifests, dihedral augmentation and train/validation splits.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::imageio;
use crate::raster::Gray16;
use crate::scenegen::{LabeledFrame, Provenance, TrackingMode};

/// One of the eight symmetries of the pixel grid, as a signed permutation
/// matrix acting on coordinates measured from the frame center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct D4 {
    m: [[i8; 2]; 2],
}

impl D4 {
    pub const IDENTITY: D4 = D4 {
        m: [[1, 0], [0, 1]],
    };
    /// Clockwise on screen (y grows downward): `(x, y) -> (H - y, x)`.
    pub const ROT90: D4 = D4 {
        m: [[0, -1], [1, 0]],
    };
    pub const ROT180: D4 = D4 {
        m: [[-1, 0], [0, -1]],
    };
    pub const ROT270: D4 = D4 {
        m: [[0, 1], [-1, 0]],
    };
    /// Mirror left-right: `x -> W - x`.
    pub const FLIP_H: D4 = D4 {
        m: [[-1, 0], [0, 1]],
    };
    pub const FLIP_V: D4 = D4 {
        m: [[1, 0], [0, -1]],
    };
    pub const TRANSPOSE: D4 = D4 {
        m: [[0, 1], [1, 0]],
    };
    pub const ANTI_TRANSPOSE: D4 = D4 {
        m: [[0, -1], [-1, 0]],
    };

    pub const ALL: [D4; 8] = [
        D4::IDENTITY,
        D4::ROT90,
        D4::ROT180,
        D4::ROT270,
        D4::FLIP_H,
        D4::FLIP_V,
        D4::TRANSPOSE,
        D4::ANTI_TRANSPOSE,
    ];

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 8] = [
            "id",
            "rot90",
            "rot180",
            "rot270",
            "fliph",
            "flipv",
            "transpose",
            "antitranspose",
        ];
        NAMES[self.index()]
    }

    pub fn index(self) -> usize {
        D4::ALL
            .iter()
            .position(|&e| e == self)
            .expect("closed group")
    }

    /// Element equal to applying `self` first, then `next`.
    pub fn then(self, next: D4) -> D4 {
        let (a, b) = (next.m, self.m);
        let mut m = [[0i8; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        D4 { m }
    }

    pub fn inverse(self) -> D4 {
        D4 {
            m: [[self.m[0][0], self.m[1][0]], [self.m[0][1], self.m[1][1]]],
        }
    }

    pub fn swaps_axes(self) -> bool {
        self.m[0][0] == 0
    }

    pub fn output_size(self, width: usize, height: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (height, width)
        } else {
            (width, height)
        }
    }

    /// Map a continuous point of a `width x height` frame.
    pub fn map_point(self, width: usize, height: usize, x: f64, y: f64) -> (f64, f64) {
        let (w2, h2) = self.output_size(width, height);
        let u = x - width as f64 / 2.0;
        let v = y - height as f64 / 2.0;
        let m = self.m;
        let u2 = m[0][0] as f64 * u + m[0][1] as f64 * v;
        let v2 = m[1][0] as f64 * u + m[1][1] as f64 * v;
        (u2 + w2 as f64 / 2.0, v2 + h2 as f64 / 2.0)
    }

    pub fn map_box(self, width: usize, height: usize, b: &BoundingBox) -> BoundingBox {
        let (ax, ay) = self.map_point(width, height, b.x_min, b.y_min);
        let (bx, by) = self.map_point(width, height, b.x_max, b.y_max);
        BoundingBox {
            x_min: ax.min(bx),
            y_min: ay.min(by),
            x_max: ax.max(bx),
            y_max: ay.max(by),
        }
    }

    pub fn apply_image(self, img: &Gray16) -> Gray16 {
        let (w, h) = (img.width as i64, img.height as i64);
        let (w2, h2) = self.output_size(img.width, img.height);
        let m = self.m;
        let mut out = vec![0u16; img.data.len()];
        // Doubled center offsets keep the arithmetic in integers.
        for y in 0..h {
            let v = 2 * y + 1 - h;
            for x in 0..w {
                let u = 2 * x + 1 - w;
                let u2 = m[0][0] as i64 * u + m[0][1] as i64 * v;
                let v2 = m[1][0] as i64 * u + m[1][1] as i64 * v;
                let x2 = ((u2 + w2 as i64 - 1) / 2) as usize;
                let y2 = ((v2 + h2 as i64 - 1) / 2) as usize;
                out[y2 * w2 + x2] = img.data[(y * w + x) as usize];
            }
        }
        Gray16 {
            width: w2,
            height: h2,
            data: out,
        }
    }
}

/// Apply a grid symmetry to pixels and boxes together.
pub fn transform_d4(frame: &LabeledFrame, element: D4) -> LabeledFrame {
    let (w, h) = (frame.width(), frame.height());
    LabeledFrame {
        pixels: element.apply_image(&frame.pixels),
        boxes: frame
            .boxes
            .iter()
            .map(|b| element.map_box(w, h, b))
            .collect(),
        tracking_mode: frame.tracking_mode,
        provenance: frame.provenance.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoundingBox>,
    pub mode: TrackingMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// `None` for a pool that has not been split yet.
    pub split: Option<Split>,
    pub augmentation_applied: bool,
    pub records: Vec<AnnotationRecord>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Value {
        let records: Vec<Value> = self
            .records
            .iter()
            .map(|r| {
                json!({
                    "image": r.image,
                    "width": r.width,
                    "height": r.height,
                    "boxes": r.boxes.iter().map(|b| b.to_array().to_vec()).collect::<Vec<_>>(),
                    "mode": r.mode.as_str(),
                })
            })
            .collect();
        json!({
            "split": self.split.map(Split::as_str),
            "augmentation_applied": self.augmentation_applied,
            "records": records,
        })
    }

    /// Parse and validate; error messages name the record index and field.
    pub fn from_json(v: &Value) -> std::result::Result<Self, String> {
        let obj = v.as_object().ok_or("manifest must be a JSON object")?;
        let split = match obj.get("split") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) if s == "train" => Some(Split::Train),
            Some(Value::String(s)) if s == "val" => Some(Split::Val),
            Some(other) => return Err(format!("field `split`: unexpected value {other}")),
        };
        let augmentation_applied = obj
            .get("augmentation_applied")
            .and_then(Value::as_bool)
            .ok_or("field `augmentation_applied`: expected a boolean")?;
        let recs = obj
            .get("records")
            .and_then(Value::as_array)
            .ok_or("field `records`: expected an array")?;
        let mut seen = HashSet::new();
        let mut records = Vec::with_capacity(recs.len());
        for (i, r) in recs.iter().enumerate() {
            let rec = parse_record(r).map_err(|e| format!("record {i}: {e}"))?;
            if !seen.insert(rec.image.clone()) {
                return Err(format!(
                    "record {i}: field `image`: duplicate path {:?}",
                    rec.image
                ));
            }
            records.push(rec);
        }
        Ok(Self {
            split,
            augmentation_applied,
            records,
        })
    }
}

fn parse_record(v: &Value) -> std::result::Result<AnnotationRecord, String> {
    let obj = v.as_object().ok_or("expected an object")?;
    let image = obj
        .get("image")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or("field `image`: expected a non-empty string")?
        .to_string();
    if Path::new(&image).is_absolute() || image.split(['/', '\\']).any(|c| c == "..") {
        return Err(format!(
            "field `image`: {image:?} must be a relative path inside the dataset"
        ));
    }
    let dim = |k: &str| {
        obj.get(k)
            .and_then(Value::as_u64)
            .filter(|&d| d > 0 && d <= u32::MAX as u64)
            .map(|d| d as usize)
            .ok_or(format!("field `{k}`: expected a positive integer"))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let mode = obj
        .get("mode")
        .and_then(Value::as_str)
        .and_then(TrackingMode::parse)
        .ok_or("field `mode`: expected \"RateTrack\" or \"Sidereal\"")?;
    let raw = obj
        .get("boxes")
        .and_then(Value::as_array)
        .ok_or("field `boxes`: expected an array")?;
    let mut boxes = Vec::with_capacity(raw.len());
    for (j, b) in raw.iter().enumerate() {
        let c: Vec<f64> = b
            .as_array()
            .filter(|a| a.len() == 4)
            .and_then(|a| a.iter().map(Value::as_f64).collect())
            .ok_or(format!(
                "field `boxes[{j}]`: expected [x_min, y_min, x_max, y_max]"
            ))?;
        let bb = BoundingBox::new(c[0], c[1], c[2], c[3])
            .map_err(|_| format!("field `boxes[{j}]`: requires x_min < x_max and y_min < y_max"))?;
        if !bb.inside(width, height) {
            return Err(format!(
                "field `boxes[{j}]`: outside the {width}x{height} image"
            ));
        }
        boxes.push(bb);
    }
    Ok(AnnotationRecord {
        image,
        width,
        height,
        boxes,
        mode,
    })
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(&manifest.to_json())
        .map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text).map_err(|msg| Error::parse(path, msg))
}

pub fn parse_manifest(text: &str) -> std::result::Result<DatasetManifest, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    DatasetManifest::from_json(&v)
}

/// A frame paired with its file name inside a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub frame: LabeledFrame,
}

/// In-memory dataset: a manifest together with its decoded frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Option<Split>,
    pub augmentation_applied: bool,
    pub samples: Vec<Sample>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    pub fn from_frames(frames: Vec<LabeledFrame>) -> Self {
        let samples = frames
            .into_iter()
            .enumerate()
            .map(|(i, frame)| Sample {
                name: format!("frame_{i:05}.png"),
                frame,
            })
            .collect();
        Self {
            split: None,
            augmentation_applied: false,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &LabeledFrame> {
        self.samples.iter().map(|s| &s.frame)
    }

    pub fn box_count(&self) -> usize {
        self.frames().map(|f| f.boxes.len()).sum()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            split: self.split,
            augmentation_applied: self.augmentation_applied,
            records: self
                .samples
                .iter()
                .map(|s| AnnotationRecord {
                    image: s.name.clone(),
                    width: s.frame.width(),
                    height: s.frame.height(),
                    boxes: s.frame.boxes.clone(),
                    mode: s.frame.tracking_mode,
                })
                .collect(),
        }
    }

    /// Write every image plus `manifest.json` into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(&s.name) {
                return Err(Error::Data(format!("duplicate image name {:?}", s.name)));
            }
            imageio::write_image(&dir.join(&s.name), &s.frame.pixels)?;
        }
        let path = dir.join(MANIFEST_FILE);
        save_manifest(&path, &manifest)?;
        Ok(path)
    }

    /// Load a manifest and every image it references (paths relative to the manifest).
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m = load_manifest(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::with_capacity(m.records.len());
        for (i, r) in m.records.into_iter().enumerate() {
            let p = base.join(&r.image);
            let pixels = imageio::read_image(&p)?;
            if (pixels.width, pixels.height) != (r.width, r.height) {
                return Err(Error::parse(
                    manifest_path,
                    format!(
                        "record {i}: fields `width`/`height`: manifest says {}x{}, image is {}x{}",
                        r.width, r.height, pixels.width, pixels.height
                    ),
                ));
            }
            samples.push(Sample {
                name: r.image,
                frame: LabeledFrame {
                    pixels,
                    boxes: r.boxes,
                    tracking_mode: r.mode,
                    provenance: Provenance::External,
                },
            });
        }
        Ok(Self {
            split: m.split,
            augmentation_applied: m.augmentation_applied,
            samples,
        })
    }

    /// The single tracking mode shared by all frames.
    pub fn tracking_mode(&self) -> Result<TrackingMode> {
        let mut modes = self.frames().map(|f| f.tracking_mode);
        let first = modes
            .next()
            .ok_or_else(|| Error::Data("dataset is empty".into()))?;
        if modes.any(|m| m != first) {
            return Err(Error::Data("dataset mixes tracking modes".into()));
        }
        Ok(first)
    }
}

/// All eight grid symmetries of every frame.
pub fn augment_x8(ds: &Dataset) -> Result<Dataset> {
    if ds.augmentation_applied {
        return Err(Error::Data(
            "dataset is already augmented; refusing to augment twice".into(),
        ));
    }
    let mut samples = Vec::with_capacity(ds.samples.len() * 8);
    for s in &ds.samples {
        let (stem, ext) = match s.name.rsplit_once('.') {
            Some((a, b)) => (a, b),
            None => (s.name.as_str(), "png"),
        };
        for e in D4::ALL {
            samples.push(Sample {
                name: format!("{stem}_{}.{ext}", e.name()),
                frame: transform_d4(&s.frame, e),
            });
        }
    }
    Ok(Dataset {
        split: ds.split,
        augmentation_applied: true,
        samples,
    })
}

/// Seeded shuffle, then `round(train_fraction * N)` items to train and the rest
/// to validation. Each side keeps the input order.
pub fn split_items<T: Clone>(
    items: &[T],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "cannot split {n} record(s); need at least 2"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} of {n} records leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = idx[..n_train].to_vec();
    let mut val_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| items[i].clone()).collect(),
        val_idx.iter().map(|&i| items[i].clone()).collect(),
    ))
}

pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_items(&ds.samples, train_fraction, seed)?;
    let mk = |samples, split| Dataset {
        split: Some(split),
        augmentation_applied: ds.augmentation_applied,
        samples,
    };
    Ok((mk(train, Split::Train), mk(val, Split::Val)))
}
