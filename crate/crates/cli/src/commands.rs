use std::fmt;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use log::info;
use satdet_core::dataset::{augment_x8, split_dataset, Dataset};
use satdet_core::detector::{train, DetectorModel, ModelSpec, SizeClass, TrainConfig};
use satdet_core::eval::render::{render_annotated, save_annotated};
use satdet_core::eval::{benchmark_latency, evaluate, EvalReport, LatencyReport};
use satdet_core::imageio::read_image;
use satdet_core::quant::{calibrate, convert_model, AnyModel};
use satdet_core::scenegen::{generate_observation_set_with_rso_counts, SceneConfig};
use satdet_core::{BoundingBox, Detection, Error, Gray16};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::table;
use crate::{
    AugmentArgs, BenchArgs, Command, EvalArgs, GenerateArgs, InferArgs, PipelineArgs, QuantizeArgs,
    SplitArgs, TrainArgs,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(v)
        .map_err(|e| CliError::Core(Error::Internal(e.to_string())))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| {
        CliError::Core(Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    })
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>> {
    let bad = || CliError::Usage(format!("--rso-range: expected MIN-MAX, got {s:?}"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    let (a, b): (usize, usize) = (
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    );
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => generate(a),
        Command::Split(a) => split(a),
        Command::Augment(a) => augment(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut base = match &a.config {
        Some(p) => SceneConfig::from_json(&read_text(p)?).map_err(|e| match e {
            Error::Config(m) => CliError::Core(Error::Parse {
                path: p.clone(),
                msg: m,
            }),
            other => other.into(),
        })?,
        None => SceneConfig::default(),
    };
    if let Some(m) = a.mode {
        base.tracking_mode = m.into();
    }
    if let Some(n) = a.rso_count {
        base.rso_count = n;
    }
    let range = match &a.rso_range {
        Some(s) => parse_range(s)?,
        None => base.rso_count..=base.rso_count,
    };
    let frames = generate_observation_set_with_rso_counts(
        &base,
        a.observations,
        a.frames_per_obs,
        a.seed,
        range,
    )?;
    let ds = Dataset::from_frames(frames);
    let manifest = ds.save(&a.out)?;
    println!(
        "{} frames, {} boxes -> {}",
        ds.len(),
        ds.box_count(),
        manifest.display()
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let ds = Dataset::load(&a.manifest)?;
    let (tr, va) = split_dataset(&ds, a.train_fraction, a.seed)?;
    let pt = tr.save(&a.out.join("train"))?;
    let pv = va.save(&a.out.join("val"))?;
    println!("train {} frames -> {}", tr.len(), pt.display());
    println!("val   {} frames -> {}", va.len(), pv.display());
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<()> {
    let ds = Dataset::load(&a.manifest)?;
    let aug = augment_x8(&ds)?;
    let p = aug.save(&a.out)?;
    println!(
        "{} -> {} frames, {} boxes -> {}",
        ds.len(),
        aug.len(),
        aug.box_count(),
        p.display()
    );
    Ok(())
}

fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.json")
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => parse_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let trs = Dataset::load(&a.train)?;
    let vas = Dataset::load(&a.val)?;
    run_training(&trs, &vas, a.size.into(), &cfg, &a.out)
}

fn run_training(
    trs: &Dataset,
    vas: &Dataset,
    size: SizeClass,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<()> {
    let spec = ModelSpec::for_size(size, trs.tracking_mode()?);
    info!(
        "training {:?} on {} frames, validating on {}",
        size,
        trs.len(),
        vas.len()
    );
    let outcome = train(trs, vas, spec, cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    outcome.model.save(out)?;
    write_json(
        &log_path(out),
        &json!({ "best_epoch": outcome.best_epoch, "epochs": outcome.log }),
    )?;
    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "best epoch {} of {}: val P {:.4} R {:.4} F1 {:.4} -> {}",
        outcome.best_epoch,
        outcome.log.len(),
        best.val_precision,
        best.val_recall,
        best.val_f1,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DetectionOut {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    confidence: f64,
}

fn infer(a: InferArgs) -> Result<()> {
    let model = AnyModel::load(&a.model)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    for path in &a.images {
        let img = read_image(path)?;
        let dets = model.detect(&img, a.threshold, a.nms_iou)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        let out: Vec<DetectionOut> = dets
            .iter()
            .map(|d| DetectionOut {
                bbox: d.bbox.to_array(),
                confidence: d.confidence,
            })
            .collect();
        write_json(
            &a.out.join(format!("{stem}.detections.json")),
            &json!({
                "image": path,
                "width": img.width,
                "height": img.height,
                "confidence_threshold": a.threshold,
                "detections": out,
            }),
        )?;
        let png = a.out.join(format!("{stem}.annotated.png"));
        save_annotated(&png, &render_annotated(&img, &dets, &[]))?;
        println!("{}: {} detections", path.display(), dets.len());
    }
    Ok(())
}

fn file_len(p: &Path) -> Result<u64> {
    Ok(std::fs::metadata(p).map_err(|e| io_err(p, e))?.len())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let model = DetectorModel::load(&a.model)?;
    let ds = Dataset::load(&a.calib)?;
    run_quantize(&model, &ds, a.max_frames, &a.model, &a.out)
}

fn run_quantize(
    model: &DetectorModel,
    ds: &Dataset,
    max_frames: Option<usize>,
    src: &Path,
    out: &Path,
) -> Result<()> {
    let frames: Vec<Gray16> = ds
        .frames()
        .take(max_frames.unwrap_or(usize::MAX))
        .map(|f| f.pixels.clone())
        .collect();
    let calib = calibrate(model, &frames)?;
    let (q, report) = convert_model(model, &calib)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    q.save(out)?;
    write_json(&out.with_extension("report.json"), &report)?;
    let worst = report
        .tensors
        .iter()
        .filter_map(|t| t.snr_db.map(|s| (s, t.name.as_str())))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    println!(
        "calibrated on {} frames; {} bytes -> {} bytes{}",
        calib.frames,
        file_len(src)?,
        file_len(out)?,
        worst.map_or(String::new(), |(s, n)| format!(
            "; lowest weight SNR {s:.1} dB ({n})"
        ))
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    model: PathBuf,
    size_class: SizeClass,
    precision_kind: satdet_core::detector::Precision,
    report: EvalReport,
}

fn label(path: &Path, m: &AnyModel) -> String {
    format!(
        "{} ({:?}, {:?})",
        path.file_name().map_or_else(
            || path.display().to_string(),
            |s| s.to_string_lossy().into_owned()
        ),
        m.spec().size_class,
        m.spec().precision
    )
}

fn detect_all(m: &AnyModel, ds: &Dataset, thr: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    ds.frames()
        .map(|f| m.detect(&f.pixels, thr, nms_iou).map_err(CliError::from))
        .collect()
}

fn eval_models(
    models: &[PathBuf],
    ds: &Dataset,
    thr: f64,
    nms_iou: f64,
    match_iou: f64,
) -> Result<Vec<EvalRow>> {
    let gts: Vec<Vec<BoundingBox>> = ds.frames().map(|f| f.boxes.clone()).collect();
    let mode = ds.tracking_mode()?;
    let mut rows = Vec::new();
    for p in models {
        let m = AnyModel::load(p)?;
        if m.spec().tracking_mode != mode {
            log::warn!(
                "{} was trained on {} frames; evaluating on {}",
                p.display(),
                m.spec().tracking_mode,
                mode
            );
        }
        let dets = detect_all(&m, ds, thr, nms_iou)?;
        rows.push(EvalRow {
            model: p.clone(),
            size_class: m.spec().size_class,
            precision_kind: m.spec().precision,
            report: evaluate(&dets, &gts, match_iou, thr),
        });
    }
    Ok(rows)
}

fn print_eval(rows: &[EvalRow]) {
    let Some(first) = rows.first() else { return };
    println!(
        "{} frames, {} targets, confidence >= {}, match IoU >= {}",
        first.report.n_frames,
        first.report.n_targets,
        first.report.confidence_threshold,
        first.report.iou_match_threshold
    );
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!(
                    "{} ({:?}, {:?})",
                    r.model.file_name().map_or_else(
                        || r.model.display().to_string(),
                        |s| s.to_string_lossy().into_owned()
                    ),
                    r.size_class,
                    r.precision_kind
                ),
                format!("{:.4}", r.report.precision),
                format!("{:.4}", r.report.recall),
                format!("{:.4}", r.report.f1),
                r.report.tp.to_string(),
                r.report.fp.to_string(),
                r.report.fn_.to_string(),
            ]
        })
        .collect();
    print!(
        "{}",
        table::render(
            &["Model", "Precision", "Recall", "F1", "TP", "FP", "FN"],
            &body
        )
    );
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = Dataset::load(&a.manifest)?;
    let rows = eval_models(&a.model, &ds, a.threshold, a.nms_iou, a.match_iou)?;
    print_eval(&rows);
    if let Some(p) = &a.json {
        write_json(p, &rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    model: String,
    report: LatencyReport,
}

fn bench_frames(mode: satdet_core::TrackingMode, n: usize, seed: u64) -> Result<Vec<Gray16>> {
    let base = SceneConfig {
        tracking_mode: mode,
        ..SceneConfig::default()
    };
    Ok(
        generate_observation_set_with_rso_counts(&base, n, 1, seed, 1..=3)?
            .into_iter()
            .map(|f| f.pixels)
            .collect(),
    )
}

fn bench_models(
    models: &[PathBuf],
    frames: Option<&[Gray16]>,
    a: &BenchArgs,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for p in models {
        let m = AnyModel::load(p)?;
        let generated;
        let fr = match frames {
            Some(f) => f,
            None => {
                generated = bench_frames(m.spec().tracking_mode, a.frames, a.seed)?;
                &generated[..]
            }
        };
        let report = benchmark_latency(|f| m.detect(f, a.threshold, a.nms_iou), fr, a.warmup)?;
        rows.push(BenchRow {
            model: label(p, &m),
            report,
        });
    }
    Ok(rows)
}

fn print_bench(rows: &[BenchRow]) {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.report.n_images.to_string(),
                format!("{:.4}", r.report.mean_s),
                format!("{:.4}", r.report.std_s),
                format!("{:.4}", r.report.p50_s),
                format!("{:.4}", r.report.p95_s),
            ]
        })
        .collect();
    print!(
        "{}",
        table::render(
            &["Model", "Images", "Mean (s)", "Std (s)", "p50 (s)", "p95 (s)"],
            &body
        )
    );
}

fn bench(a: BenchArgs) -> Result<()> {
    let frames = match &a.manifest {
        Some(p) => Some(
            Dataset::load(p)?
                .frames()
                .map(|f| f.pixels.clone())
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    let rows = bench_models(&a.model, frames.as_deref(), &a)?;
    print_bench(&rows);
    if let Some(p) = &a.json {
        write_json(p, &rows)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub confidence_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub bench_frames: usize,
    pub warmup: usize,
    pub calibration_frames: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.25,
            nms_iou: 0.45,
            match_iou: 0.3,
            bench_frames: 100,
            warmup: 5,
            calibration_frames: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub bench: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Relative paths resolve against the config file's directory.
    pub workspace_dir: PathBuf,
    pub scene: SceneConfig,
    pub observations: usize,
    pub frames_per_obs: usize,
    pub rso_count_range: Option<(usize, usize)>,
    pub train_fraction: f64,
    pub size_class: SizeClass,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub seeds: Seeds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workspace_dir: PathBuf::from("workspace"),
            scene: SceneConfig::default(),
            observations: 15,
            frames_per_obs: 1,
            rso_count_range: Some((1, 3)),
            train_fraction: 2.0 / 3.0,
            size_class: SizeClass::Small,
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            seeds: Seeds::default(),
        }
    }
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let cfg: PipelineConfig = parse_json(&a.config)?;
    cfg.scene.validate()?;
    cfg.train.validate()?;
    let base_dir = a.config.parent().unwrap_or(Path::new("."));
    let ws = base_dir.join(&cfg.workspace_dir);
    std::fs::create_dir_all(&ws).map_err(|e| io_err(&ws, e))?;

    let range = cfg
        .rso_count_range
        .map_or(cfg.scene.rso_count..=cfg.scene.rso_count, |(a, b)| a..=b);
    let frames = generate_observation_set_with_rso_counts(
        &cfg.scene,
        cfg.observations,
        cfg.frames_per_obs,
        cfg.seeds.data,
        range,
    )?;
    let all = Dataset::from_frames(frames);
    all.save(&ws.join("data"))?;
    let (tr, va) = split_dataset(&all, cfg.train_fraction, cfg.seeds.split)?;
    let (tr, va) = (augment_x8(&tr)?, augment_x8(&va)?);
    tr.save(&ws.join("train"))?;
    let val_manifest = va.save(&ws.join("val"))?;
    println!(
        "data: {} source frames -> {} train / {} val",
        all.len(),
        tr.len(),
        va.len()
    );

    let float_path = ws.join("models").join("float.bin");
    let quant_path = ws.join("models").join("quantized.bin");
    run_training(&tr, &va, cfg.size_class, &cfg.train, &float_path)?;
    let model = DetectorModel::load(&float_path)?;
    run_quantize(
        &model,
        &tr,
        cfg.eval.calibration_frames,
        &float_path,
        &quant_path,
    )?;

    let models = [float_path, quant_path];
    let e = &cfg.eval;
    let rows = eval_models(&models, &va, e.confidence_threshold, e.nms_iou, e.match_iou)?;
    print_eval(&rows);
    write_json(&ws.join("eval.json"), &rows)?;

    let bench_args = BenchArgs {
        model: models.to_vec(),
        manifest: None,
        frames: e.bench_frames,
        warmup: e.warmup,
        seed: cfg.seeds.bench,
        threshold: e.confidence_threshold,
        nms_iou: e.nms_iou,
        json: None,
    };
    let brows = bench_models(&models, None, &bench_args)?;
    print_bench(&brows);
    write_json(&ws.join("bench.json"), &brows)?;
    info!("validation manifest: {}", val_manifest.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("1-3").unwrap(), 1..=3);
        assert_eq!(parse_range("2-2").unwrap(), 2..=2);
        for bad in ["3-1", "x-2", "4", ""] {
            assert_eq!(parse_range(bad).unwrap_err().exit_code(), 1);
        }
    }

    #[test]
    fn pipeline_config_defaults() {
        let c: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.observations, 15);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
