//! Synthetic RSO imagery, a single-shot detector trained on it, int8 conversion
//! of the trained model, and the metrics and timing harness used to judge both.

pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imageio;
pub mod quant;
pub mod raster;
pub mod scenegen;

pub use error::{Error, Result};
pub use geometry::{iou, BoundingBox, Detection};
pub use raster::{Canvas, Gray16};
pub use scenegen::{LabeledFrame, SceneConfig, TrackingMode};
