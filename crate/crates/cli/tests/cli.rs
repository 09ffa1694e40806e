use std::path::Path;
use std::process::{Command, Output};

fn satdet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_satdet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = satdet(args, cwd);
    assert!(
        out.status.success(),
        "satdet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SCENE: &str =
    r#"{"width_px": 128, "height_px": 128, "star_count": 8, "streak_length_px": 12.0}"#;

#[test]
fn full_recipe_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("scene.json"), SCENE).unwrap();

    ok(
        &[
            "generate",
            "--config",
            "scene.json",
            "--observations",
            "6",
            "--frames-per-obs",
            "1",
            "--rso-range",
            "1-2",
            "--seed",
            "3",
            "--out",
            "data",
        ],
        d,
    );
    let first = std::fs::read(d.join("data/manifest.json")).unwrap();
    ok(
        &[
            "generate",
            "--config",
            "scene.json",
            "--observations",
            "6",
            "--frames-per-obs",
            "1",
            "--rso-range",
            "1-2",
            "--seed",
            "3",
            "--out",
            "again",
        ],
        d,
    );
    assert_eq!(first, std::fs::read(d.join("again/manifest.json")).unwrap());

    ok(
        &[
            "split",
            "--manifest",
            "data/manifest.json",
            "--seed",
            "1",
            "--out",
            "split",
        ],
        d,
    );
    ok(
        &[
            "augment",
            "--manifest",
            "split/train/manifest.json",
            "--out",
            "train",
        ],
        d,
    );
    ok(
        &[
            "augment",
            "--manifest",
            "split/val/manifest.json",
            "--out",
            "val",
        ],
        d,
    );
    let out = satdet(
        &[
            "augment",
            "--manifest",
            "train/manifest.json",
            "--out",
            "twice",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(2));

    ok(
        &[
            "train",
            "--train",
            "train/manifest.json",
            "--val",
            "val/manifest.json",
            "--epochs",
            "1",
            "--out",
            "models/float.bin",
        ],
        d,
    );
    assert!(d.join("models/float.log.json").exists());
    ok(
        &[
            "quantize",
            "--model",
            "models/float.bin",
            "--calib",
            "train/manifest.json",
            "--max-frames",
            "4",
            "--out",
            "models/q.bin",
        ],
        d,
    );
    assert!(d.join("models/q.report.json").exists());
    let fsz = std::fs::metadata(d.join("models/float.bin")).unwrap().len();
    let qsz = std::fs::metadata(d.join("models/q.bin")).unwrap().len();
    assert!(qsz < fsz);

    let table = ok(
        &[
            "eval",
            "--model",
            "models/float.bin",
            "models/q.bin",
            "--manifest",
            "val/manifest.json",
            "--json",
            "eval.json",
        ],
        d,
    );
    assert!(table.contains("Precision") && table.contains("F1"));
    assert!(table.contains("float.bin (Small, Float)"), "{table}");
    assert!(table.contains("q.bin (Small, Quantized)"), "{table}");
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);

    ok(
        &[
            "infer",
            "--model",
            "models/q.bin",
            "data/frame_00000.png",
            "--threshold",
            "0.01",
            "--out",
            "pred",
        ],
        d,
    );
    let dets: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(d.join("pred/frame_00000.detections.json")).unwrap(),
    )
    .unwrap();
    assert!(dets.is_object() || dets.is_array());
    assert!(d.join("pred/frame_00000.annotated.png").exists());

    let bench = ok(
        &[
            "bench",
            "--model",
            "models/float.bin",
            "models/q.bin",
            "--manifest",
            "val/manifest.json",
            "--frames",
            "3",
            "--warmup",
            "1",
            "--json",
            "bench.json",
        ],
        d,
    );
    assert!(bench.contains("q.bin"), "{bench}");
    assert!(d.join("bench.json").exists());
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("scene.json"), SCENE).unwrap();
    ok(
        &[
            "generate",
            "--config",
            "scene.json",
            "--observations",
            "1",
            "--frames-per-obs",
            "1",
            "--rso-count",
            "0",
            "--out",
            "data",
        ],
        d,
    );
    let out = satdet(
        &[
            "infer",
            "--model",
            "nowhere/model.bin",
            "data/frame_00000.png",
            "--out",
            "pred",
        ],
        d,
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere/model.bin"), "{err}");
}

#[test]
fn usage_and_config_errors_use_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(satdet(&["generate"], d).status.code(), Some(1));
    assert_eq!(satdet(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(satdet(&["--help"], d).status.code(), Some(0));
    std::fs::write(d.join("bad.json"), r#"{"width_px": 0}"#).unwrap();
    let out = satdet(&["generate", "--config", "bad.json", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}
