//! Single-class SSD-style detector on an inverted-residual backbone.

pub mod anchors;
pub mod infer;
pub mod loss;
pub mod model;
pub mod train;

pub use anchors::{
    build_anchors, decode_box, encode_box, match_anchors, AnchorConfig, AnchorLabel,
};
pub use infer::{detect, nms, preprocess};
pub use loss::{assign_targets, ssd_loss, AnchorTargets, LossOutput};
pub use model::{DetectorModel, ModelSpec, Precision, SizeClass};
pub use train::{train, EpochLog, TrainConfig, TrainOutcome};
