use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satdet_core::detector::{preprocess, DetectorModel, ModelSpec, Precision};
use satdet_core::quant::{
    calibrate, convert_model, dequantize_tensor, detect_quantized, float_conv_shapes,
    folded_forward, parse_quantized, quantize_tensor, AnyModel, QOp, QuantParams, QuantizedModel,
};
use satdet_core::scenegen::generate_scene;
use satdet_core::{Gray16, SceneConfig, TrackingMode};

/// Untrained model with every parameter scaled by a random factor in
/// [0.7, 1.3] so batch-norm statistics are not the identity.
fn perturbed_model(seed: u64) -> DetectorModel {
    let mut m = DetectorModel::new(ModelSpec::small(TrackingMode::RateTrack), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let id = m.params.id(&n).unwrap();
        for v in m.params.get_mut(id).data_mut() {
            *v *= rng.random_range(0.7..1.3);
        }
    }
    m
}

fn frames(n: usize) -> Vec<Gray16> {
    (0..n as u64)
        .map(|s| {
            let cfg = SceneConfig {
                width_px: 192,
                height_px: 160,
                streak_length_px: 16.0,
                star_count: 12,
                seed: s,
                ..SceneConfig::default()
            };
            generate_scene(&cfg).unwrap().pixels
        })
        .collect()
}

proptest! {
    #[test]
    fn affine_round_trip_within_half_a_step(lo in -50.0f64..50.0, span in 1e-3f64..100.0, seed in any::<u64>()) {
        let hi = lo + span;
        let q = QuantParams::from_range(lo, hi);
        q.validate().unwrap();
        let (a, b) = (lo.min(0.0), hi.max(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..100_000).map(|_| rng.random_range(a..=b)).collect();
        let back = dequantize_tensor(&quantize_tensor(&vals, q), q);
        let worst = vals.iter().zip(&back).map(|(v, w)| (v - w).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= q.scale / 2.0 * (1.0 + 1e-9), "{} > {}", worst, q.scale / 2.0);
        prop_assert_eq!(q.quantize(0.0) as i32, q.zero_point);
    }
}

#[test]
fn relu6_span_gives_expected_scale() {
    let q = QuantParams::from_range(0.0, 6.0);
    assert!((q.scale - 0.023529).abs() < 1e-6);
    assert_eq!(q.zero_point, -128);
}

#[test]
fn zero_weights_give_zero_payload() {
    let q = QuantParams::symmetric(&[0.0; 12]);
    q.validate().unwrap();
    assert!(quantize_tensor(&[0.0; 12], q).iter().all(|&v| v == 0));
}

#[test]
fn folding_matches_the_layered_model() {
    let m = perturbed_model(1);
    for f in frames(2) {
        let x = preprocess(&f, m.spec.input_size);
        let a = m.forward(x.clone()).unwrap();
        let b = folded_forward(&m, x).unwrap();
        assert_eq!(a.len(), b.len());
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.shape(), v.shape());
            let scale = u.data().iter().fold(1e-12f64, |s, x| s.max(x.abs()));
            for (p, q) in u.data().iter().zip(v.data()) {
                assert!((p - q).abs() <= 1e-9 * scale, "{p} vs {q}");
            }
        }
    }
}

#[test]
fn calibration_ranges_only_grow() {
    let m = perturbed_model(2);
    let fs = frames(4);
    let mut prev = calibrate(&m, &fs[..1]).unwrap();
    for k in 2..=fs.len() {
        let next = calibrate(&m, &fs[..k]).unwrap();
        assert_eq!(next.frames, k);
        for (a, b) in prev.ranges.iter().zip(&next.ranges) {
            assert!(b.0 <= a.0 && b.1 >= a.1);
        }
        prev = next;
    }
    assert!(calibrate(&m, &[]).is_err());
}

#[test]
fn blank_frame_calibrates_input_to_zero() {
    let m = perturbed_model(3);
    let c = calibrate(&m, &[Gray16::filled(64, 64, 0)]).unwrap();
    assert_eq!(c.ranges[0], (0.0, 0.0));
}

fn convs(q: &QuantizedModel) -> Vec<&satdet_core::quant::QConv> {
    let mut out = Vec::new();
    for op in &q.backbone {
        match op {
            QOp::Conv(c) => out.push(c),
            QOp::Block { convs, .. } => out.extend(convs),
        }
    }
    out.extend(&q.heads);
    out
}

#[test]
fn conversion_is_isomorphic_and_relu6_ranges_stay_in_bounds() {
    let m = perturbed_model(4);
    let calib = calibrate(&m, &frames(3)).unwrap();
    let (q, report) = convert_model(&m, &calib).unwrap();
    assert_eq!(q.conv_shapes(), float_conv_shapes(&m));
    assert_eq!(q.anchors(), m.anchors());
    assert_eq!(q.spec.precision, Precision::Quantized);
    assert_eq!(report.calibration_frames, 3);
    assert_eq!(report.tensors.len(), q.conv_shapes().len());
    for t in &report.tensors {
        assert!(
            t.max_abs_error <= t.scale / 2.0 * (1.0 + 1e-9),
            "{}",
            t.name
        );
    }
    let mut relu6 = 0;
    for c in convs(&q) {
        c.input.validate().unwrap();
        c.output.validate().unwrap();
        if c.relu6 {
            relu6 += 1;
            // A range inside [0, 6] maps its lower end to -128 with step <= 6/255.
            assert_eq!(c.output.zero_point, -128);
            assert!(c.output.scale <= 6.0 / 255.0 * (1.0 + 1e-12));
        }
    }
    assert!(relu6 > 0);
}

#[test]
fn quantized_file_is_smaller_and_round_trips() {
    let m = perturbed_model(5);
    let fs = frames(3);
    let (q, _) = convert_model(&m, &calibrate(&m, &fs).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (fp, qp) = (dir.path().join("f.bin"), dir.path().join("q.bin"));
    m.save(&fp).unwrap();
    q.save(&qp).unwrap();
    let fsz = std::fs::metadata(&fp).unwrap().len();
    let qsz = std::fs::metadata(&qp).unwrap().len();
    assert!(qsz * 4 <= fsz, "quantized {qsz} B vs float {fsz} B");

    let back = QuantizedModel::load(&qp).unwrap();
    assert_eq!(back.conv_shapes(), q.conv_shapes());
    let side = std::fs::read_to_string(satdet_core::detector::model::sidecar_path(&qp)).unwrap();
    let parsed = parse_quantized(&side, &std::fs::read(&qp).unwrap()).unwrap();
    for f in &fs {
        let a = detect_quantized(&q, f, 0.0, 0.45).unwrap();
        assert_eq!(detect_quantized(&back, f, 0.0, 0.45).unwrap(), a);
        assert_eq!(detect_quantized(&parsed, f, 0.0, 0.45).unwrap(), a);
    }
    assert!(matches!(
        AnyModel::load(&qp).unwrap(),
        AnyModel::Quantized(_)
    ));
    assert!(matches!(AnyModel::load(&fp).unwrap(), AnyModel::Float(_)));
    assert!(DetectorModel::load(&qp).is_err());
    assert!(QuantizedModel::load(&fp).is_err());
}

#[test]
fn quantized_outputs_track_float_outputs() {
    let m = perturbed_model(6);
    let fs = frames(4);
    let (q, _) = convert_model(&m, &calibrate(&m, &fs).unwrap()).unwrap();
    for f in &fs {
        let x = preprocess(f, m.spec.input_size);
        let a = m.forward(x.clone()).unwrap();
        let b = q.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.shape(), v.shape());
            let num: f64 = u
                .data()
                .iter()
                .zip(v.data())
                .map(|(p, q)| (p - q).powi(2))
                .sum();
            let den: f64 = u.data().iter().map(|p| p * p).sum();
            let snr_db = 10.0 * (den / num).log10();
            assert!(snr_db > 15.0, "head SNR {snr_db:.1} dB");
        }
    }
}
