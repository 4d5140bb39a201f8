use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gace::dataset::{Dataset, DatasetManifest, DatasetWriter};
use gace::eval::{curve_csv, curves_svg, evaluate, oracle_gap, ApMode, EvalFrame};
use gace::experiment::{feature_grid, radius_sweep, rescore_all, run_grid};
use gace::supervision::{assign_labels, ClassThresholds};
use gace::synth::{self, generate_frames, BenchV1, DetectorErrorModel, SceneConfig};
use gace::trainer::{build_training_set, train_with_log, TrainConfig};
use gace::{modelfile, par, FeatureGroups, Frame, GaceModel, ModelDims, NormConfig};

/// Environment variable that sizes the worker pool. Speed only; results do
/// not depend on it.
const THREADS_ENV: &str = "GACE_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "gace",
    version,
    about = "Rescore black-box LiDAR 3D detections"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic benchmark dataset.
    Synth(SynthArgs),
    /// Attach TP/FP and IoU targets to every detection of a dataset.
    Label(LabelArgs),
    /// Train a rescoring model.
    Train(TrainArgs),
    /// Replace detection scores with model confidences.
    Rescore(RescoreArgs),
    /// AP / APH / AP@R40 against ground truth.
    Eval(EvalArgs),
    /// AP of perfect re-ranking versus the current ranking.
    Oracle(OracleArgs),
    /// Per-stage timing of the rescoring path.
    Bench(BenchArgs),
    /// Train and evaluate the feature-group, branch and radius grid.
    AblateReport(AblateArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// bench-v1 writes train/ and eval/ splits; throughput and transfer-b write one set.
    #[arg(long, default_value = "bench-v1")]
    preset: String,
    /// Override the frame count (writes a single set of frames 0..N).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "a")]
    error_model: String,
    /// Defaults to seed + 10.
    #[arg(long)]
    detector_seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct LabelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.5, 0.5])]
    thresholds: Vec<f64>,
}

#[derive(Args, Debug, Serialize)]
struct TrainOpts {
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_iou: f64,
    #[arg(long, default_value_t = 40.0)]
    radius: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.5, 0.5])]
    thresholds: Vec<f64>,
    /// Ignore the elongation channel (4-channel model).
    #[arg(long)]
    no_elongation: bool,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 128)]
    instance_embed: usize,
    #[arg(long, default_value_t = 64)]
    context_embed: usize,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out_model: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
    /// Inputs to switch off: box, points, angle, stats, context.
    #[arg(long, default_value = "")]
    ablate: String,
    /// Tab-separated per-epoch losses.
    #[arg(long)]
    log_out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct RescoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.5, 0.5])]
    iou_thr: Vec<f64>,
    /// Headline mAP uses 40 recall positions.
    #[arg(long)]
    r40: bool,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for per-class PR curve CSVs and an SVG plot.
    #[arg(long)]
    curves_out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct OracleArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.5, 0.5])]
    iou_thr: Vec<f64>,
    #[arg(long)]
    r40: bool,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    /// Dataset to time; a synthetic ~100-detection set when absent.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Untrained default-size model when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 16)]
    synth_frames: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 15.0, 40.0, 80.0])]
    radii: Vec<f64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.to_string())
    }
}

type Res = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Logs the arguments with every default filled in, plus whatever library
/// configuration they resolve to.
fn log_config<T: Serialize>(command: &str, args: &T, resolved: serde_json::Value) {
    let v = serde_json::json!({
        "command": command,
        "args": args,
        "resolved": resolved,
        "threads": par::threads(),
    });
    log::info!(
        "config {}",
        serde_json::to_string(&v).expect("config serializes")
    );
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Res {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_all(ds: &Dataset) -> Result<Vec<Frame>, Failure> {
    let ids: Vec<&str> = ds.manifest.frame_ids().collect();
    par::map(&ids, |id| ds.read_frame(id))
        .into_iter()
        .map(|r| r.map_err(Failure::from))
        .collect()
}

fn write_dataset(out: &Path, frames: &[Frame], channels: usize, seed: u64, digest: String) -> Res {
    let mut manifest = DatasetManifest::new(channels, synth::class_names());
    manifest.seed = Some(seed);
    manifest.config_digest = Some(digest);
    let mut w = DatasetWriter::create(out, manifest)?;
    for f in frames {
        w.write_frame(f)?;
    }
    w.finish()?;
    log::info!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Res {
    let mut scene = match a.preset.as_str() {
        "bench-v1" => SceneConfig::bench_v1(),
        "throughput" => SceneConfig::throughput(),
        "transfer-b" => synth::transfer_b_scene(),
        p => {
            return Err(usage(format!(
                "unknown preset '{p}' (bench-v1, throughput, transfer-b)"
            )))
        }
    };
    scene.seed = a.seed;
    if let Some(n) = a.frames {
        scene.frames = n;
    }
    let detector = DetectorErrorModel::by_name(&a.error_model).ok_or_else(|| {
        usage(format!(
            "unknown error model '{}' (a, b, perfect)",
            a.error_model
        ))
    })?;
    let detector_seed = a.detector_seed.unwrap_or(a.seed.wrapping_add(10));
    log_config(
        "synth",
        &a,
        serde_json::json!({ "scene": scene, "detector": detector, "detector_seed": detector_seed }),
    );
    let channels = if scene.elongation { 5 } else { 4 };
    let digest = scene.digest();
    if a.preset == "bench-v1" && a.frames.is_none() {
        for (split, range) in [("train", BenchV1::TRAIN), ("eval", BenchV1::EVAL)] {
            let frames = generate_frames(&scene, &detector, detector_seed, range);
            write_dataset(
                &a.out.join(split),
                &frames,
                channels,
                a.seed,
                digest.clone(),
            )?;
        }
    } else {
        let frames = generate_frames(&scene, &detector, detector_seed, 0..scene.frames);
        write_dataset(&a.out, &frames, channels, a.seed, digest)?;
    }
    Ok(())
}

fn label_cmd(a: LabelArgs) -> Res {
    log_config("label", &a, serde_json::Value::Null);
    let ds = Dataset::open(&a.data)?;
    let thr = ClassThresholds(a.thresholds.clone());
    if thr.len() != ds.manifest.class_names.len() {
        return Err(usage(format!(
            "{} thresholds given for {} classes",
            thr.len(),
            ds.manifest.class_names.len()
        )));
    }
    let (mut tp, mut all) = (0usize, 0usize);
    for id in ds.manifest.frame_ids() {
        let dets = ds.read_detections(id)?.unwrap_or_default();
        let gts = ds
            .read_ground_truth(id)?
            .ok_or_else(|| Failure::Data(format!("frame {id} has no ground truth")))?;
        let labels = assign_labels(&dets, &gts, &thr)?;
        tp += labels.iter().filter(|l| l.u).count();
        all += labels.len();
        ds.write_labels(id, &labels)?;
    }
    log::info!("labeled {all} detections, {tp} true positives");
    Ok(())
}

fn train_config(o: &TrainOpts) -> TrainConfig {
    let mut cfg = TrainConfig::with_seed(o.seed);
    cfg.epochs = o.epochs;
    cfg.lr = o.lr;
    cfg.lambda_iou = o.lambda_iou;
    cfg.radius = o.radius;
    cfg.batch = o.batch;
    cfg.thresholds = ClassThresholds(o.thresholds.clone());
    cfg.dims = ModelDims {
        hidden: o.hidden,
        instance_embed: o.instance_embed,
        context_embed: o.context_embed,
    };
    cfg.norm = NormConfig {
        use_elongation: !o.no_elongation,
        ..NormConfig::default()
    };
    cfg
}

fn check_dataset_fits(cfg: &TrainConfig, ds: &Dataset) -> Res {
    let n = ds.manifest.class_names.len();
    if cfg.thresholds.len() != n || cfg.norm.class_count != n {
        return Err(usage(format!(
            "dataset has {n} classes; {} thresholds and {} model classes configured",
            cfg.thresholds.len(),
            cfg.norm.class_count
        )));
    }
    if ds.manifest.channels == 4 && cfg.norm.use_elongation {
        return Err(Failure::Data(
            "dataset has 4-channel points; pass --no-elongation to train a 4-channel model".into(),
        ));
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Res {
    let mut cfg = train_config(&a.opts);
    let mut off = Vec::new();
    for token in a.ablate.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if token == "context" {
            cfg.branches.context = false;
        } else {
            off.push(token);
        }
    }
    let off = FeatureGroups::parse_list(&off.join(",")).map_err(usage)?;
    cfg.groups = FeatureGroups {
        box_properties: !off.box_properties,
        num_points: !off.num_points,
        viewing_angle: !off.viewing_angle,
        point_statistics: !off.point_statistics,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    log_config("train", &a, serde_json::json!(cfg));
    let ds = Dataset::open(&a.train)?;
    check_dataset_fits(&cfg, &ds)?;
    let store = build_training_set(
        ds.manifest
            .frame_ids()
            .map(|id| ds.read_frame(id).map_err(|e| Failure::Data(e.to_string()))),
        &cfg.norm_config(),
        &cfg.thresholds,
    )?;
    log::info!(
        "{} frames, {} detections",
        store.frames.len(),
        store.samples()
    );
    let mut lines = String::from("epoch\tmean_total_loss\tmean_focal\tmean_iou_l1\twall_seconds\n");
    let outcome = train_with_log(&store, &cfg, |e| {
        println!("{}", e.line());
        lines.push_str(&e.line());
        lines.push('\n');
    })?;
    modelfile::save(&outcome.model, &a.out_model)?;
    if let Some(p) = &a.log_out {
        write_file(p, lines)?;
    }
    log::info!("model written to {}", a.out_model.display());
    Ok(())
}

fn rescore_cmd(a: RescoreArgs) -> Res {
    log_config("rescore", &a, serde_json::Value::Null);
    let model = modelfile::load(&a.model)?;
    let ds = Dataset::open(&a.frames)?;
    let frames = read_all(&ds)?;
    let scores = rescore_all(&model, &frames)?;
    let mut manifest = DatasetManifest::new(ds.manifest.channels, ds.manifest.class_names.clone());
    manifest.seed = ds.manifest.seed;
    manifest.config_digest = ds.manifest.config_digest.clone();
    let mut w = DatasetWriter::create(&a.out, manifest)?;
    for (f, s) in frames.iter().zip(&scores) {
        let mut dets = f.detections.clone();
        for (d, s) in dets.iter_mut().zip(s) {
            d.score = *s;
        }
        w.write_detections(&f.frame_id, &dets)?;
    }
    w.finish()?;
    log::info!("rescored {} frames into {}", frames.len(), a.out.display());
    Ok(())
}

/// Pairs prediction detections with ground truth by frame id.
fn load_pairs(
    pred: &Path,
    gt: &Path,
    thresholds: &[f64],
) -> Result<(Vec<EvalFrame>, Vec<String>), Failure> {
    let p = Dataset::open(pred)?;
    let g = Dataset::open(gt)?;
    if p.manifest.class_names != g.manifest.class_names {
        return Err(Failure::Data(
            "prediction and ground-truth class lists differ".into(),
        ));
    }
    let names = g.manifest.class_names.clone();
    if thresholds.len() != names.len() {
        return Err(usage(format!(
            "{} IoU thresholds given for {} classes",
            thresholds.len(),
            names.len()
        )));
    }
    let mut frames = Vec::with_capacity(g.manifest.frames.len());
    for id in g.manifest.frame_ids() {
        if p.manifest.frames.iter().all(|f| f.id != id) {
            return Err(Failure::Data(format!("no predictions for frame {id}")));
        }
        let dets = p.read_detections(id)?.unwrap_or_default();
        let gts = g
            .read_ground_truth(id)?
            .ok_or_else(|| Failure::Data(format!("frame {id} has no ground truth")))?;
        frames.push(EvalFrame::new(id, dets, gts));
    }
    Ok((frames, names))
}

fn eval_cmd(a: EvalArgs) -> Res {
    log_config("eval", &a, serde_json::Value::Null);
    let (frames, names) = load_pairs(&a.pred, &a.gt, &a.iou_thr)?;
    let report = evaluate(&frames, &names, &a.iou_thr);
    print!("{}", report.table());
    let mode = if a.r40 {
        ApMode::R40
    } else {
        ApMode::Continuous
    };
    println!(
        "mAP ({}) {:.4}",
        if a.r40 { "R40" } else { "continuous" },
        100.0 * report.map(mode)
    );
    if let Some(p) = &a.report {
        write_file(
            p,
            serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        )?;
    }
    if let Some(dir) = &a.curves_out {
        std::fs::create_dir_all(dir)?;
        for c in &report.classes {
            write_file(
                &dir.join(format!("{}.csv", c.class_name)),
                curve_csv(&c.curve),
            )?;
        }
        let curves: Vec<(&str, &[gace::eval::PrPoint])> = report
            .classes
            .iter()
            .map(|c| (c.class_name.as_str(), c.curve.as_slice()))
            .collect();
        write_file(&dir.join("curves.svg"), curves_svg(&curves))?;
    }
    Ok(())
}

fn oracle_cmd(a: OracleArgs) -> Res {
    log_config("oracle", &a, serde_json::Value::Null);
    let (frames, names) = load_pairs(&a.pred, &a.gt, &a.iou_thr)?;
    let mode = if a.r40 {
        ApMode::R40
    } else {
        ApMode::Continuous
    };
    println!("{:<12} {:>9} {:>9} {:>7}", "class", "AP", "oracleAP", "gap");
    for (c, name) in names.iter().enumerate() {
        let g = oracle_gap(&frames, c, a.iou_thr[c], mode);
        println!(
            "{:<12} {:>9.2} {:>9.2} {:>7.2}",
            name,
            100.0 * g.baseline,
            100.0 * g.oracle,
            100.0 * g.gap()
        );
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Res {
    log_config("bench", &a, serde_json::Value::Null);
    let model = match &a.model {
        Some(p) => modelfile::load(p)?,
        None => GaceModel::new(
            NormConfig::default(),
            ModelDims::default(),
            FeatureGroups::all(),
            Default::default(),
            0,
        ),
    };
    let frames = match &a.frames {
        Some(p) => read_all(&Dataset::open(p)?)?,
        None => generate_frames(
            &SceneConfig::throughput(),
            &DetectorErrorModel::a(),
            3,
            0..a.synth_frames,
        ),
    };
    if frames.is_empty() {
        return Err(Failure::Data("no frames to time".into()));
    }
    for f in &frames {
        gace::trainer::check_channels(&model.norm, &f.points)?;
    }
    let report = gace::bench::run(&model, &frames, a.repeats.max(1));
    print!("{}", report.table());
    if let Some(p) = &a.report {
        write_file(
            p,
            serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        )?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Res {
    let base = train_config(&a.opts);
    base.validate().map_err(|e| usage(e.to_string()))?;
    log_config("ablate-report", &a, serde_json::json!(base));
    let train = Dataset::open(&a.train)?;
    let eval = Dataset::open(&a.eval)?;
    check_dataset_fits(&base, &train)?;
    let train_frames = read_all(&train)?;
    let eval_frames = read_all(&eval)?;
    let mut variants = feature_grid(base.radius);
    variants.extend(radius_sweep(&a.radii));
    let report = run_grid(
        || train_frames.clone(),
        &eval_frames,
        &base,
        &variants,
        &train.manifest.class_names,
    )?;
    print!("{}", report.table());
    if let Some(p) = &a.report {
        write_file(
            p,
            serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        )?;
    }
    Ok(())
}

fn run(cli: Cli) -> Res {
    match cli.cmd {
        Cmd::Synth(a) => synth_cmd(a),
        Cmd::Label(a) => label_cmd(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Rescore(a) => rescore_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Oracle(a) => oracle_cmd(a),
        Cmd::Bench(a) => bench_cmd(a),
        Cmd::AblateReport(a) => ablate_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = par::init_threads(n) {
                    log::warn!("{THREADS_ENV}: {e}");
                }
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
