use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satdet_core::detector::infer::{postprocess, DecodeContext};
use satdet_core::detector::{
    build_anchors, decode_box, detect, encode_box, match_anchors, nms, AnchorLabel, DetectorModel,
    ModelSpec,
};
use satdet_core::{BoundingBox, Detection, Gray16, TrackingMode};
use satdet_nn::Tensor;

/// Independent IoU: overlap area over union area, written out longhand.
fn iou_ref(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let ua = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min)
        - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

/// O(n^2) reference: repeatedly take the highest remaining confidence (earliest
/// on ties) and discard everything overlapping it at or above the threshold.
fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].confidence > dets[b].confidence) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        out.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i] && (i == b || iou_ref(&dets[i].bbox, &dets[b].bbox) >= thr) {
                alive[i] = false;
            }
        }
    }
    out
}

fn random_dets(rng: &mut impl Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..60.0);
            let y = rng.random_range(0.0..60.0);
            let w = rng.random_range(1.0..20.0);
            let h = rng.random_range(1.0..20.0);
            // Coarse confidences so ties occur.
            let c = (rng.random_range(0..20) as f64 + 0.5) / 20.0;
            Detection {
                bbox: BoundingBox::new(x, y, x + w, y + h).unwrap(),
                confidence: c,
            }
        })
        .collect()
}

#[test]
fn nms_equals_brute_force_on_1000_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for case in 0..1000 {
        let n = rng.random_range(0..=50);
        let thr = rng.random_range(0.05..0.95);
        let dets = random_dets(&mut rng, n);
        assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr), "case {case}");
    }
}

#[test]
fn nms_small_examples() {
    let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let one = vec![Detection {
        bbox: b,
        confidence: 0.4,
    }];
    assert_eq!(nms(&one, 0.45), one);
    let two = vec![
        Detection {
            bbox: b,
            confidence: 0.8,
        },
        Detection {
            bbox: b,
            confidence: 0.9,
        },
    ];
    assert_eq!(nms(&two, 0.45), vec![two[1]]);
}

proptest! {
    #[test]
    fn nms_is_idempotent_and_separates(seed in any::<u64>(), n in 0usize..40, thr in 0.05f64..0.95) {
        let dets = random_dets(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let once = nms(&dets, thr);
        prop_assert_eq!(nms(&once, thr), once.clone());
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                prop_assert!(iou_ref(&a.bbox, &b.bbox) < thr);
            }
        }
    }
}

#[test]
fn encode_decode_round_trip_on_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let rand_box = |rng: &mut ChaCha8Rng| {
        let cx = rng.random_range(0.0..256.0);
        let cy = rng.random_range(0.0..256.0);
        BoundingBox::from_center(
            cx,
            cy,
            rng.random_range(0.5..80.0),
            rng.random_range(0.5..80.0),
        )
    };
    for _ in 0..1000 {
        let gt = rand_box(&mut rng);
        let anchor = rand_box(&mut rng);
        let t = encode_box(&gt, &anchor).unwrap();
        let back = decode_box(&t, &anchor);
        for (a, b) in back.to_array().iter().zip(gt.to_array()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-9, "max round-trip error {worst}");
}

#[test]
fn zero_offsets_decode_to_the_anchor() {
    let a = BoundingBox::new(3.0, 4.0, 15.0, 10.0).unwrap();
    assert_eq!(encode_box(&a, &a).unwrap(), [0.0; 4]);
    let d = decode_box(&[0.0; 4], &a);
    for (u, v) in d.to_array().iter().zip(a.to_array()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn faint_overlap_gets_exactly_one_forced_positive() {
    let spec = ModelSpec::small(TrackingMode::RateTrack);
    let anchors = build_anchors(&spec.anchor_config, spec.input_size).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let gt = BoundingBox::from_center(
            rng.random_range(10.0..246.0),
            rng.random_range(10.0..246.0),
            2.0,
            2.0,
        );
        let (best, best_iou) = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (i, iou_ref(&gt, a)))
            .fold(
                (usize::MAX, -1.0),
                |acc, x| if x.1 > acc.1 { x } else { acc },
            );
        assert!(best_iou < 0.5);
        let labels = match_anchors(&[gt], &anchors, 0.5, 0.4);
        let pos: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, AnchorLabel::Positive(_)))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(pos, vec![best]);
        assert_eq!(labels[best], AnchorLabel::Positive(0));
    }
}

#[test]
fn empty_ground_truth_means_all_negative() {
    let spec = ModelSpec::small(TrackingMode::Sidereal);
    let anchors = build_anchors(&spec.anchor_config, spec.input_size).unwrap();
    assert!(match_anchors(&[], &anchors, 0.5, 0.4)
        .iter()
        .all(|l| *l == AnchorLabel::Negative));
}

fn random_heads(spec: &ModelSpec, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = spec.anchor_config.anchors_per_cell();
    spec.anchor_config
        .map_sizes(spec.input_size)
        .into_iter()
        .map(|(h, w)| {
            let data = (0..a * 5 * h * w)
                .map(|_| rng.random_range(-6.0..6.0))
                .collect();
            Tensor::new(vec![1, a * 5, h, w], data).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn postprocess_boxes_stay_in_frame_and_thresholds_are_monotone(
        seed in any::<u64>(), fw in 64usize..700, fh in 64usize..700,
    ) {
        let spec = ModelSpec::small(TrackingMode::RateTrack);
        let anchors = build_anchors(&spec.anchor_config, spec.input_size).unwrap();
        let ctx = DecodeContext {
            anchors: &anchors,
            anchors_per_cell: spec.anchor_config.anchors_per_cell(),
            input_size: spec.input_size,
            frame_size: (fw, fh),
        };
        let outs = random_heads(&spec, seed);
        let mut prev = usize::MAX;
        for thr in [0.0, 0.1, 0.25, 0.5, 0.9, 0.99, 1.0] {
            let dets = postprocess(&outs, &ctx, thr, 0.45).unwrap();
            prop_assert!(dets.len() <= prev, "threshold {} raised the count", thr);
            prev = dets.len();
            for d in &dets {
                prop_assert!(d.bbox.is_valid() && d.bbox.inside(fw, fh), "{:?}", d.bbox);
                prop_assert!(d.confidence >= thr && d.confidence < 1.0);
            }
            for (i, a) in dets.iter().enumerate() {
                for b in &dets[i + 1..] {
                    prop_assert!(iou_ref(&a.bbox, &b.bbox) < 0.45);
                }
            }
        }
        prop_assert_eq!(prev, 0);
    }
}

#[test]
fn untrained_detector_respects_frame_bounds() {
    let model = DetectorModel::new(ModelSpec::small(TrackingMode::RateTrack), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (w, h) = (300, 180);
    let frame = Gray16::new(
        w,
        h,
        (0..w * h).map(|_| rng.random_range(90..130)).collect(),
    )
    .unwrap();
    let dets = detect(&model, &frame, 0.0, 0.45).unwrap();
    assert!(!dets.is_empty());
    assert!(dets.iter().all(|d| d.bbox.inside(w, h)));
    assert!(detect(&model, &frame, 1.0, 0.45).unwrap().is_empty());
}
