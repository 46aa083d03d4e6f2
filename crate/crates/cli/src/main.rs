mod draw;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dayolo::autograd::ParamStore;
use dayolo::data::{
    generate_synthetic_domain_pair, load_dataset, read_png, CorruptionSpec, SceneSpec, SplitCounts,
    SplitId,
};
use dayolo::evaluation::{
    evaluate_map, extract_features, predict, write_features_csv, DEFAULT_IOU,
};
use dayolo::model::{DecodeParams, Detector};
use dayolo::sample::{DomainLabel, ImageSample};
use dayolo::training::{fit, validate_metrics_log, Checkpoint, TrainConfig};
use dayolo::{Error, Result};
use serde_json::json;

/// Environment variable that replaces the seed of a training config.
const SEED_ENV: &str = "DAYOLO_SEED";

#[derive(Parser)]
#[command(
    name = "dayolo",
    version,
    about = "Domain adaptive one-stage detection on a clear/fog benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic clear/fog benchmark to disk.
    GenData(GenData),
    /// Train a detector from a config file.
    Train(Train),
    /// AP table of a checkpoint on one split.
    Eval(Eval),
    /// Detections for a single PNG image.
    Detect(Detect),
    /// Pooled backbone features per image and scale, as CSV.
    ExportFeatures(ExportFeatures),
    /// SVG charts from files written by the other commands.
    Plot(PlotArgs),
    /// Check every line of a metrics log against the total-loss identity.
    CheckLog(CheckLog),
}

#[derive(Args)]
struct GenData {
    /// Output directory; receives manifest.json and one folder per split.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square image side in pixels (multiple of 32).
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    #[arg(long, default_value_t = 800)]
    train_source: usize,
    #[arg(long, default_value_t = 800)]
    train_target: usize,
    #[arg(long, default_value_t = 200)]
    val_source: usize,
    #[arg(long, default_value_t = 200)]
    val_target: usize,
    /// Fog blend strength of the target domain.
    #[arg(long, default_value_t = 0.6)]
    fog: f64,
    /// Box-blur radius of the target domain.
    #[arg(long, default_value_t = 1)]
    blur: usize,
    /// Gaussian pixel noise of the target domain.
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
}

#[derive(Args)]
struct Train {
    /// TOML or JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Directory for config.toml, metrics.jsonl and the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Override the number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct DecodeFlags {
    /// Minimum objectness of a reported box.
    #[arg(long, default_value_t = 0.01)]
    conf: f64,
    /// IoU above which a lower-scoring box of the same class is suppressed.
    #[arg(long, default_value_t = 0.45)]
    nms: f64,
}

impl DecodeFlags {
    fn params(&self) -> Result<DecodeParams> {
        DecodeParams::new(self.conf, self.nms)
    }
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// One of source-train, source-val, target-val.
    #[arg(long, default_value = "target-val")]
    split: String,
    #[command(flatten)]
    decode: DecodeFlags,
    /// IoU needed for a detection to count as a hit.
    #[arg(long, default_value_t = DEFAULT_IOU)]
    iou: f64,
    /// Also write the table as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Detect {
    #[arg(long)]
    ckpt: PathBuf,
    /// PNG whose sides are multiples of 32.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    conf: f64,
    #[arg(long, default_value_t = 0.45)]
    nms: f64,
    /// Write a copy of the image with the boxes drawn on it.
    #[arg(long)]
    annotated: Option<PathBuf>,
}

#[derive(Args)]
struct ExportFeatures {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated split names.
    #[arg(long, default_value = "source-val,target-val", value_delimiter = ',')]
    splits: Vec<String>,
    /// At most this many images per split.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[command(subcommand)]
    kind: PlotKind,
}

#[derive(Subcommand)]
enum PlotKind {
    /// Loss curves and validation mAP from metrics.jsonl.
    Metrics {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision/recall curves from an AP table written by `eval --out`.
    Pr {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// 2-D PCA scatter of exported features, colored by domain.
    Features {
        #[arg(long)]
        csv: PathBuf,
        /// Which tap to embed (0, 1 or 2).
        #[arg(long, default_value_t = 2)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CheckLog {
    #[arg(long)]
    log: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape(_) | Error::Validation(_) => 1,
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::Divergence { .. } => 3,
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Detect(a) => detect(a),
        Command::ExportFeatures(a) => export_features(a),
        Command::Plot(a) => match a.kind {
            PlotKind::Metrics { log, out } => plot::metrics(&log, &out),
            PlotKind::Pr { table, out } => plot::pr_curves(&table, &out),
            PlotKind::Features { csv, scale, out } => plot::features(&csv, scale, &out),
        },
        Command::CheckLog(a) => {
            let report = validate_metrics_log(&a.log)?;
            print_json(&json!({ "lines": report.lines, "max_residual": report.max_residual }));
            Ok(())
        }
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let scene = SceneSpec {
        image_size: a.image_size,
        ..Default::default()
    };
    let corruption = CorruptionSpec {
        fog_strength: a.fog,
        blur_radius: a.blur,
        noise_sigma: a.noise,
        ..CorruptionSpec::foggy()
    };
    let counts = SplitCounts {
        train_source: a.train_source,
        train_target: a.train_target,
        val_source: a.val_source,
        val_target: a.val_target,
    };
    let manifest = generate_synthetic_domain_pair(&a.out, &scene, &corruption, counts, a.seed)?;
    print_json(&json!({ "manifest": manifest }));
    Ok(())
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                Error::Validation(format!("{SEED_ENV}={v} is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

fn train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    cfg.validate()?;
    let source = load_dataset(&a.data, SplitId::parse("source-train")?)?;
    let target = load_dataset(&a.data, SplitId::parse("target-train")?)?;
    let val = if cfg.eval_interval > 0 {
        Some(load_dataset(&a.data, SplitId::parse("target-val")?)?)
    } else {
        None
    };
    eprintln!(
        "training {} steps (seed {}) on {} source / {} target images",
        cfg.steps,
        cfg.seed,
        source.len(),
        target.len()
    );
    let out = fit(cfg, &source, &target, val.as_ref(), &a.out)?;
    print_json(&json!({
        "checkpoint": out.checkpoint,
        "metrics": out.metrics,
        "last": out.last,
    }));
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let table = evaluate_map(
        &a.ckpt,
        &a.data,
        SplitId::parse(&a.split)?,
        a.decode.params()?,
        a.iou,
    )?;
    eprint!("{}", table.render_text());
    let value = serde_json::to_value(&table).expect("table serializes");
    if let Some(path) = &a.out {
        write_text(path, &serde_json::to_string_pretty(&value).expect("json"))?;
    }
    print_json(&value);
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(Checkpoint, Detector, ParamStore)> {
    let ckpt = Checkpoint::load(ckpt)?;
    let detector = Detector::new(ckpt.header.model.clone())?;
    let params = ckpt.detector_params();
    Ok((ckpt, detector, params))
}

fn detect(a: Detect) -> Result<()> {
    let (ckpt, detector, params) = load_model(&a.ckpt)?;
    let img = read_png(&a.image)?;
    let sample = ImageSample::new(
        a.image.display().to_string(),
        DomainLabel::Target,
        img.to_tensor(),
        Vec::new(),
    )?;
    let dets = predict(
        &detector,
        &params,
        &[&sample],
        DecodeParams::new(a.conf, a.nms)?,
    )?
    .remove(0);
    let names = &ckpt.header.class_names;
    let rows: Vec<serde_json::Value> = dets
        .iter()
        .map(|d| {
            let (x1, y1, x2, y2) = d.bbox.corners();
            json!({
                "class": d.class_id(),
                "name": names.get(d.class_id()),
                "score": d.score(),
                "objectness": d.objectness,
                "box": { "cx": d.bbox.cx, "cy": d.bbox.cy, "w": d.bbox.w, "h": d.bbox.h },
                "pixels": [x1 * img.width as f64, y1 * img.height as f64, x2 * img.width as f64, y2 * img.height as f64],
            })
        })
        .collect();
    if let Some(path) = &a.annotated {
        draw::annotate(&img, &dets, path)?;
    }
    print_json(&json!({ "image": a.image, "detections": rows }));
    Ok(())
}

fn export_features(a: ExportFeatures) -> Result<()> {
    let (_, detector, params) = load_model(&a.ckpt)?;
    let mut records = Vec::new();
    for name in &a.splits {
        let ds = load_dataset(&a.data, SplitId::parse(name)?)?;
        let take = a.limit.unwrap_or(ds.len()).min(ds.len());
        let samples: Vec<&ImageSample> = ds.samples[..take].iter().collect();
        records.extend(extract_features(&detector, &params, &samples)?);
    }
    write_features_csv(&records, &a.out)?;
    print_json(&json!({ "features": a.out, "rows": records.len() }));
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}
