use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satdet_core::dataset::{
    augment_x8, load_manifest, save_manifest, split_dataset, split_items, transform_d4, Dataset,
    DatasetManifest, D4,
};
use satdet_core::scenegen::{generate_observation_set, render_noiseless, Provenance};
use satdet_core::{BoundingBox, Gray16, LabeledFrame, SceneConfig, TrackingMode};

fn random_frame(w: usize, h: usize, seed: u64) -> LabeledFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = Gray16::new(w, h, (0..w * h).map(|_| rng.random()).collect()).unwrap();
    let boxes = (0..4)
        .map(|_| {
            let x0 = rng.random_range(0.0..w as f64 - 2.0);
            let y0 = rng.random_range(0.0..h as f64 - 2.0);
            let x1 = rng.random_range(x0 + 1.0..w as f64);
            let y1 = rng.random_range(y0 + 1.0..h as f64);
            BoundingBox::new(x0, y0, x1, y1).unwrap()
        })
        .collect();
    LabeledFrame {
        pixels,
        boxes,
        tracking_mode: TrackingMode::Sidereal,
        provenance: Provenance::External,
    }
}

fn assert_boxes_close(a: &[BoundingBox], b: &[BoundingBox]) {
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(b) {
        for (u, v) in p.to_array().iter().zip(q.to_array()) {
            assert!((u - v).abs() < 1e-9, "{p:?} vs {q:?}");
        }
    }
}

#[test]
fn composition_matches_group_product_for_all_64_pairs() {
    let f = random_frame(13, 8, 1);
    for a in D4::ALL {
        for b in D4::ALL {
            let twice = transform_d4(&transform_d4(&f, a), b);
            let once = transform_d4(&f, a.then(b));
            assert_eq!(twice.pixels, once.pixels, "{} then {}", a.name(), b.name());
            assert_boxes_close(&twice.boxes, &once.boxes);
        }
    }
}

#[test]
fn inverse_undoes_every_element() {
    let f = random_frame(9, 14, 2);
    for e in D4::ALL {
        let back = transform_d4(&transform_d4(&f, e), e.inverse());
        assert_eq!(back.pixels, f.pixels);
        assert_boxes_close(&back.boxes, &f.boxes);
    }
}

#[test]
fn augmentation_preserves_box_pixel_sums() {
    for mode in [TrackingMode::RateTrack, TrackingMode::Sidereal] {
        let cfg = SceneConfig {
            width_px: 120,
            height_px: 90,
            tracking_mode: mode,
            rso_count: 3,
            star_count: 8,
            streak_length_px: 16.0,
            seed: 4,
            ..SceneConfig::default()
        };
        let (cv, boxes) = render_noiseless(&cfg).unwrap();
        let f = LabeledFrame {
            pixels: cv.quantize(),
            boxes,
            tracking_mode: mode,
            provenance: Provenance::External,
        };
        for e in D4::ALL {
            let g = transform_d4(&f, e);
            for (a, b) in f.boxes.iter().zip(&g.boxes) {
                assert_eq!(f.pixels.sum_in(a), g.pixels.sum_in(b), "{}", e.name());
            }
        }
    }
}

fn pool(n_obs: usize) -> Dataset {
    let base = SceneConfig {
        width_px: 96,
        height_px: 64,
        star_count: 5,
        streak_length_px: 10.0,
        ..SceneConfig::default()
    };
    Dataset::from_frames(generate_observation_set(&base, n_obs, 1, 8).unwrap())
}

#[test]
fn ten_plus_five_become_eighty_plus_forty() {
    let ds = pool(15);
    let (tr, va) = split_dataset(&ds, 2.0 / 3.0, 42).unwrap();
    assert_eq!((tr.len(), va.len()), (10, 5));
    let (tr8, va8) = (augment_x8(&tr).unwrap(), augment_x8(&va).unwrap());
    assert_eq!((tr8.len(), va8.len()), (80, 40));
    assert_eq!(tr8.box_count(), 8 * tr.box_count());
    assert_eq!(va8.box_count(), 8 * va.box_count());
    assert!(tr8.augmentation_applied && va8.augmentation_applied);
    assert!(augment_x8(&tr8).is_err());
}

#[test]
fn eight_distinct_images_from_an_asymmetric_frame() {
    let ds = Dataset::from_frames(vec![random_frame(16, 16, 3)]);
    let out = augment_x8(&ds).unwrap();
    assert_eq!(out.len(), 8);
    let distinct: HashSet<&[u16]> = out.frames().map(|f| f.pixels.data.as_slice()).collect();
    assert_eq!(distinct.len(), 8);
    let names: HashSet<&str> = out.samples.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names.len(), 8);
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 2usize..200, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let n_train = (frac * n as f64).round() as usize;
        match split_items(&items, frac, seed) {
            Ok((tr, va)) => {
                prop_assert_eq!(tr.len(), n_train);
                prop_assert_eq!(tr.len() + va.len(), n);
                let a: HashSet<_> = tr.iter().collect();
                let b: HashSet<_> = va.iter().collect();
                prop_assert!(a.is_disjoint(&b));
                prop_assert_eq!(a.union(&b).count(), n);
                prop_assert_eq!(split_items(&items, frac, seed).unwrap(), (tr, va));
            }
            Err(_) => prop_assert!(n_train == 0 || n_train == n),
        }
    }
}

#[test]
fn n_minus_one_leaves_exactly_one_for_val() {
    let items: Vec<u32> = (0..20).collect();
    let (tr, va) = split_items(&items, 19.0 / 20.0, 0).unwrap();
    assert_eq!((tr.len(), va.len()), (19, 1));
    assert!(split_items(&items[..0], 0.5, 0).is_err());
    assert!(split_items(&items[..1], 0.5, 0).is_err());
}

#[test]
fn manifests_round_trip_field_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    let empty = DatasetManifest {
        split: None,
        augmentation_applied: false,
        records: vec![],
    };
    save_manifest(&p, &empty).unwrap();
    assert_eq!(load_manifest(&p).unwrap(), empty);

    let (tr, _) = split_dataset(&pool(15), 2.0 / 3.0, 1).unwrap();
    let m = augment_x8(&tr).unwrap().manifest();
    assert_eq!(m.records.len(), 80);
    save_manifest(&p, &m).unwrap();
    assert_eq!(load_manifest(&p).unwrap(), m);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = augment_x8(&pool(2)).unwrap();
    let path = ds.save(dir.path()).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.manifest(), ds.manifest());
    for (a, b) in back.frames().zip(ds.frames()) {
        assert_eq!(a.pixels, b.pixels);
    }
}

#[test]
fn malformed_box_in_file_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    let text = r#"{"split": "val", "augmentation_applied": false, "records": [
        {"image": "a.png", "width": 50, "height": 50, "boxes": [[1, 1, 5, 5]], "mode": "RateTrack"},
        {"image": "b.png", "width": 50, "height": 50, "boxes": [[30, 1, 10, 5]], "mode": "RateTrack"}
    ]}"#;
    std::fs::write(&p, text).unwrap();
    let msg = load_manifest(&p).unwrap_err().to_string();
    assert!(
        msg.contains("record 1") && msg.contains("boxes[0]"),
        "{msg}"
    );
}
