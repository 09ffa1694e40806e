//! Wall-clock latency of per-frame detection.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::raster::Gray16;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    pub n_images: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
}

impl LatencyReport {
    /// Summary of raw timings; percentiles use the nearest-rank rule.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data(
                "latency report needs at least one measurement".into(),
            ));
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |p: f64| sorted[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(Self {
            n_images: n,
            mean_s: mean,
            std_s: var.sqrt(),
            p50_s: rank(0.50),
            p95_s: rank(0.95),
        })
    }
}

/// Time `detect` once per frame, in order, after `warmup` untimed calls that
/// cycle through the frames. Runs on its own thread.
pub fn benchmark_latency<F>(detect: F, frames: &[Gray16], warmup: usize) -> Result<LatencyReport>
where
    F: FnMut(&Gray16) -> Result<Vec<Detection>> + Send,
{
    if frames.is_empty() {
        return Err(Error::Data("cannot benchmark an empty frame set".into()));
    }
    let mut detect = detect;
    let samples = std::thread::scope(|s| {
        std::thread::Builder::new()
            .name("latency-bench".into())
            .spawn_scoped(s, move || -> Result<Vec<f64>> {
                for f in frames.iter().cycle().take(warmup) {
                    detect(f)?;
                }
                let mut out = Vec::with_capacity(frames.len());
                for f in frames {
                    let t = Instant::now();
                    let dets = detect(f)?;
                    out.push(t.elapsed().as_secs_f64());
                    std::hint::black_box(dets);
                }
                Ok(out)
            })
            .map_err(|e| Error::Internal(format!("cannot start benchmark thread: {e}")))?
            .join()
            .map_err(|_| Error::Internal("benchmark thread panicked".into()))?
    })?;
    LatencyReport::from_samples(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample() {
        let r = LatencyReport::from_samples(&[0.25]).unwrap();
        assert_eq!(
            (r.mean_s, r.p50_s, r.p95_s, r.std_s),
            (0.25, 0.25, 0.25, 0.0)
        );
    }

    #[test]
    fn nearest_rank() {
        let s: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let r = LatencyReport::from_samples(&s).unwrap();
        assert_eq!((r.p50_s, r.p95_s), (50.0, 95.0));
        assert!((r.mean_s - 50.5).abs() < 1e-12);
    }

    #[test]
    fn empty_is_error() {
        assert!(benchmark_latency(|_| Ok(vec![]), &[], 3).is_err());
        assert!(LatencyReport::from_samples(&[]).is_err());
    }

    #[test]
    fn counts_frames_not_warmup() {
        let frames = vec![Gray16::filled(4, 4, 0); 3];
        let mut calls = 0;
        let r = benchmark_latency(
            |_| {
                calls += 1;
                Ok(vec![])
            },
            &frames,
            5,
        )
        .unwrap();
        assert_eq!(r.n_images, 3);
        assert_eq!(calls, 8);
    }
}
