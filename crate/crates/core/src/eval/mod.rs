//! Detection metrics, latency measurement, a classical source-extraction
//! baseline, and annotated renders.

pub mod baseline;
pub mod bench;
pub mod metrics;
pub mod render;

pub use baseline::{baseline_detect, SourceShape};
pub use bench::{benchmark_latency, LatencyReport};
pub use metrics::{
    evaluate, f1_score, match_detections, precision_recall_f1, EvalReport, MatchResult,
};
pub use render::render_annotated;
