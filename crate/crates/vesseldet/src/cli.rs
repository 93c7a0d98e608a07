//! Command-line entry points: train, predict, eval, synth and a generated
//! configuration reference.
//!
//! Exit codes: 0 success, 1 configuration error, 2 dataset/input error,
//! 3 non-finite-loss abort. Logs go to standard error; results go to files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Axis;
use rayon::prelude::*;

use crate::config::{self, ConfigError};
use crate::data::{self, letterbox_image, synth, DataError};
use crate::geometry::{BBox, Detection, Space};
use crate::metrics::evaluate_dataset;
use crate::model::{load_checkpoint, save_checkpoint};
use crate::trainer::{self, TrainError};

#[derive(Parser)]
#[command(
    name = "vesseldet",
    about = "Single-class anchor-free detector for vessel elements in micrographs",
    version
)]
struct Cli {
    /// Force single-threaded execution (results are identical either way).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a detector from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable key=value override (TOML value syntax).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint over a directory of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Confidence threshold.
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        /// NMS IoU threshold.
        #[arg(long = "nms-iou", default_value_t = 0.45)]
        nms_iou: f64,
        /// Also write images with predicted boxes drawn.
        #[arg(long)]
        overlay: bool,
    },
    /// Score prediction files against label files.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long = "iou-thresh", default_value_t = 0.3)]
        iou_thresh: f64,
        /// Directory for report files (and overlays, if requested).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Draw matched/false-positive/false-negative boxes; needs --images
        /// and --out.
        #[arg(long)]
        overlay: bool,
        /// Source images for overlay rendering.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Generate a deterministic synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "n-images", default_value_t = 100)]
        n_images: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        canvas: u32,
        /// Inclusive vessel count range, e.g. 3-8.
        #[arg(long, default_value = "3-8")]
        vessels: String,
        /// Vessel length range in pixels.
        #[arg(long = "vessel-length", default_value = "40-120")]
        vessel_length: String,
        /// Vessel width range in pixels.
        #[arg(long = "vessel-width", default_value = "12-30")]
        vessel_width: String,
        /// Distractor fiber count range.
        #[arg(long, default_value = "2-6")]
        fibers: String,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long = "val-fraction", default_value_t = 0.2)]
        val_fraction: f64,
        /// Load the full dataset spec from a TOML file instead of flags.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Print every configuration key with its default and meaning.
    ConfigReference,
}

/// Errors carrying their process exit code.
enum CliError {
    Config(String),
    Data(String),
    NonFiniteLoss(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::NonFiniteLoss(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::NonFiniteLoss(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::NonFiniteLoss(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => CliError::Config(m.to_string()),
            TrainError::EmptyTrainSplit | TrainError::EmptyValidation => {
                CliError::Data(e.to_string())
            }
        }
    }
}

pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.deterministic {
        // ignore failure if a pool already exists (e.g. repeated calls in tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global();
    }
    let result = match cli.cmd {
        Cmd::Train {
            config,
            overrides,
            seed,
            out,
        } => cmd_train(&config, &overrides, seed, out.as_deref()),
        Cmd::Predict {
            checkpoint,
            images,
            out,
            conf,
            nms_iou,
            overlay,
        } => cmd_predict(&checkpoint, &images, &out, conf, nms_iou, overlay),
        Cmd::Eval {
            predictions,
            labels,
            iou_thresh,
            out,
            overlay,
            images,
        } => cmd_eval(
            &predictions,
            &labels,
            iou_thresh,
            out.as_deref(),
            overlay,
            images.as_deref(),
        ),
        Cmd::Synth {
            out,
            n_images,
            seed,
            canvas,
            vessels,
            vessel_length,
            vessel_width,
            fibers,
            noise,
            val_fraction,
            spec,
        } => cmd_synth(
            &out,
            n_images,
            seed,
            canvas,
            &vessels,
            &vessel_length,
            &vessel_width,
            &fibers,
            noise,
            val_fraction,
            spec.as_deref(),
        ),
        Cmd::ConfigReference => {
            print!("{}", config::reference());
            Ok(())
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{}", e.message());
            e.exit_code()
        }
    }
}

fn cmd_train(
    config_path: &Path,
    overrides: &[String],
    seed: Option<u64>,
    out_override: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = config::load_run_config(config_path, overrides)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if cfg.dataset_root.is_empty() {
        return Err(CliError::Config(
            "dataset_root is required for training".into(),
        ));
    }
    let root = PathBuf::from(&cfg.dataset_root);
    let records = data::load_dataset(&root)?;
    let explicit = data::load_split(&root)?;
    let (train_recs, val_recs) =
        data::split_records(records, explicit.as_ref(), cfg.val_fraction, cfg.seed);
    log::info!(
        "dataset: {} train / {} val images",
        train_recs.len(),
        val_recs.len()
    );

    let outcome = trainer::train(cfg.model_config(), cfg.train_config(), &train_recs, &val_recs)?;

    let out_dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let ckpt_path = out_dir.join("best.ckpt");
    save_checkpoint(&ckpt_path, &outcome.model, &outcome.meta)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut log_text = String::new();
    for entry in &outcome.log {
        log_text.push_str(&entry.to_line());
        log_text.push('\n');
    }
    std::fs::write(out_dir.join("train_log.txt"), log_text)
        .map_err(|e| CliError::Data(e.to_string()))?;
    log::info!(
        "best F2 {:.4} at confidence {:.2} (epoch {}); checkpoint: {}",
        outcome.meta.best_f2,
        outcome.meta.best_conf_thresh,
        outcome.meta.epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "images directory {} does not exist",
            dir.display()
        )));
    }
    let exts = ["png", "jpg", "jpeg", "tif", "tiff"];
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::Data(e.to_string()))? {
        let path = entry.map_err(|e| CliError::Data(e.to_string()))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if ok {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

fn draw_box(img: &mut image::RgbImage, b: &BBox, color: [u8; 3], thickness: u32) {
    let (w, h) = img.dimensions();
    let (x1, y1, x2, y2) = b.corners();
    let clamp_x = |v: f64| (v.round().max(0.0) as u32).min(w.saturating_sub(1));
    let clamp_y = |v: f64| (v.round().max(0.0) as u32).min(h.saturating_sub(1));
    let (x1, y1, x2, y2) = (clamp_x(x1), clamp_y(y1), clamp_x(x2), clamp_y(y2));
    let px = image::Rgb(color);
    for t in 0..thickness {
        for x in x1..=x2 {
            img.put_pixel(x, (y1 + t).min(h - 1), px);
            img.put_pixel(x, y2.saturating_sub(t), px);
        }
        for y in y1..=y2 {
            img.put_pixel((x1 + t).min(w - 1), y, px);
            img.put_pixel(x2.saturating_sub(t), y, px);
        }
    }
}

fn cmd_predict(
    checkpoint: &Path,
    images: &Path,
    out: &Path,
    conf: f64,
    nms_iou: f64,
    overlay: bool,
) -> Result<(), CliError> {
    let (model, meta) = load_checkpoint(checkpoint).map_err(|e| CliError::Config(e.to_string()))?;
    if model.cfg.input_h != model.cfg.input_w {
        return Err(CliError::Config(
            "prediction requires a square model input".into(),
        ));
    }
    log::info!(
        "loaded checkpoint (epoch {}, best F2 {:.4})",
        meta.epoch,
        meta.best_f2
    );
    let entries = list_images(images)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(e.to_string()))?;
    if entries.is_empty() {
        log::warn!("no images in {}", images.display());
        return Ok(());
    }
    let input = model.cfg.input_w as u32;
    let results: Vec<bool> = entries
        .par_iter()
        .map(|(stem, path)| {
            let img = match image::open(path) {
                Ok(i) => i.to_rgb8(),
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", path.display());
                    return false;
                }
            };
            let (boxed, tf) = letterbox_image(&img, input);
            let x = data::image_to_tensor(&boxed).insert_axis(Axis(0));
            let dets = model
                .predict(&x, conf, nms_iou)
                .expect("letterboxed image matches the model input");
            let mut text = String::new();
            let mut norm_boxes = Vec::with_capacity(dets.len());
            for d in &dets {
                let nb = tf.box_to_normalized(&d.bbox);
                text.push_str(&format!(
                    "{:.8} {:.8} {:.8} {:.8} {:.8}\n",
                    nb.cx, nb.cy, nb.w, nb.h, d.confidence
                ));
                norm_boxes.push(nb);
            }
            if std::fs::write(out.join(format!("{stem}.txt")), text).is_err() {
                return false;
            }
            if overlay {
                let mut canvas = img;
                let (w, h) = canvas.dimensions();
                for nb in &norm_boxes {
                    let pb = BBox::new(
                        nb.cx * w as f64,
                        nb.cy * h as f64,
                        nb.w * w as f64,
                        nb.h * h as f64,
                        Space::Pixel,
                    );
                    draw_box(&mut canvas, &pb, [40, 90, 255], 2);
                }
                let _ = canvas.save(out.join(format!("{stem}_overlay.png")));
            }
            true
        })
        .collect();
    let succeeded = results.iter().filter(|&&ok| ok).count();
    log::info!("predicted {} of {} images", succeeded, entries.len());
    if succeeded == 0 {
        return Err(CliError::Data("every image failed to process".into()));
    }
    Ok(())
}

/// Parse a prediction file: `cx cy w h confidence` per line (normalized).
/// Four-value lines are accepted with confidence 1.0 so label files can be
/// scored directly.
fn parse_prediction_file(path: &Path) -> Result<Vec<Detection>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 4 && tokens.len() != 5 {
            return Err(CliError::Data(format!(
                "{}:{}: expected `cx cy w h [confidence]`, got {} values",
                path.display(),
                i + 1,
                tokens.len()
            )));
        }
        let mut vals = Vec::with_capacity(5);
        for t in &tokens {
            vals.push(t.parse::<f64>().map_err(|e| {
                CliError::Data(format!("{}:{}: `{t}`: {e}", path.display(), i + 1))
            })?);
        }
        let confidence = if vals.len() == 5 { vals[4] } else { 1.0 };
        out.push(Detection {
            bbox: BBox::new(vals[0], vals[1], vals[2], vals[3], Space::Normalized),
            confidence,
        });
    }
    Ok(out)
}

fn parse_label_dir(dir: &Path) -> Result<BTreeMap<String, Vec<BBox>>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "labels directory {} does not exist",
            dir.display()
        )));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::Data(e.to_string()))? {
        let path = entry.map_err(|e| CliError::Data(e.to_string()))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let parsed = data::parse_label_file(&path)?;
        out.insert(stem, parsed);
    }
    Ok(out)
}

fn cmd_eval(
    predictions: &Path,
    labels: &Path,
    iou_thresh: f64,
    out: Option<&Path>,
    overlay: bool,
    images: Option<&Path>,
) -> Result<(), CliError> {
    if !predictions.is_dir() {
        return Err(CliError::Data(format!(
            "predictions directory {} does not exist",
            predictions.display()
        )));
    }
    let annos = parse_label_dir(labels)?;
    let mut preds: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for entry in std::fs::read_dir(predictions).map_err(|e| CliError::Data(e.to_string()))? {
        let path = entry.map_err(|e| CliError::Data(e.to_string()))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        preds.insert(stem, parse_prediction_file(&path)?);
    }
    let common = annos.keys().filter(|k| preds.contains_key(*k)).count();
    if common == 0 {
        return Err(CliError::Data(
            "no common stems between predictions and labels".into(),
        ));
    }
    for stem in preds.keys() {
        if !annos.contains_key(stem) {
            log::warn!("{stem}: prediction has no matching label file, ignored");
        }
    }

    let report = evaluate_dataset(&preds, &annos, iou_thresh, 0.0);
    print!("{}", report.to_key_value_text());
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(out.join("report.txt"), report.to_key_value_text())
            .map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(out.join("per_image.tsv"), report.per_image_table())
            .map_err(|e| CliError::Data(e.to_string()))?;
    }

    if overlay {
        let (Some(images), Some(out)) = (images, out) else {
            return Err(CliError::Config(
                "--overlay requires both --images and --out".into(),
            ));
        };
        let by_stem: BTreeMap<String, PathBuf> = list_images(images)?.into_iter().collect();
        for (stem, m) in &report.per_image {
            let Some(path) = by_stem.get(stem) else {
                continue;
            };
            let Ok(img) = image::open(path) else {
                log::warn!("cannot render overlay for {stem}");
                continue;
            };
            let mut canvas = img.to_rgb8();
            let (w, h) = canvas.dimensions();
            let to_px = |b: &BBox| {
                BBox::new(
                    b.cx * w as f64,
                    b.cy * h as f64,
                    b.w * w as f64,
                    b.h * h as f64,
                    Space::Pixel,
                )
            };
            let dets = &preds[stem];
            let gts = &annos[stem];
            let matched_dets: Vec<usize> = m.matches.iter().map(|&(d, _, _)| d).collect();
            let matched_gts: Vec<usize> = m.matches.iter().map(|&(_, g, _)| g).collect();
            for (gi, gt) in gts.iter().enumerate() {
                if !matched_gts.contains(&gi) {
                    draw_box(&mut canvas, &to_px(gt), [230, 200, 60], 2); // missed
                }
            }
            for (di, det) in dets.iter().enumerate() {
                let color = if matched_dets.contains(&di) {
                    [60, 200, 90] // matched
                } else {
                    [230, 60, 60] // false positive
                };
                draw_box(&mut canvas, &to_px(&det.bbox), color, 2);
            }
            let _ = canvas.save(out.join(format!("{stem}_eval.png")));
        }
    }
    Ok(())
}

fn parse_range_u32(s: &str) -> Result<(u32, u32), CliError> {
    let parse = |t: &str| {
        t.trim()
            .parse::<u32>()
            .map_err(|e| CliError::Config(format!("bad range `{s}`: {e}")))
    };
    match s.split_once('-') {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => {
            let v = parse(s)?;
            Ok((v, v))
        }
    }
}

fn parse_range_f64(s: &str) -> Result<(f64, f64), CliError> {
    let parse = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|e| CliError::Config(format!("bad range `{s}`: {e}")))
    };
    match s.split_once('-') {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => {
            let v = parse(s)?;
            Ok((v, v))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    n_images: u32,
    seed: u64,
    canvas: u32,
    vessels: &str,
    vessel_length: &str,
    vessel_width: &str,
    fibers: &str,
    noise: f64,
    val_fraction: f64,
    spec_path: Option<&Path>,
) -> Result<(), CliError> {
    let spec = if let Some(path) = spec_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str::<synth::SynthDatasetSpec>(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    } else {
        synth::SynthDatasetSpec {
            n_images,
            val_fraction,
            scene: synth::SyntheticSceneSpec {
                canvas_w: canvas,
                canvas_h: canvas,
                n_vessels: parse_range_u32(vessels)?,
                vessel_length: parse_range_f64(vessel_length)?,
                vessel_width: parse_range_f64(vessel_width)?,
                n_distractor_fibers: parse_range_u32(fibers)?,
                noise_level: noise,
                seed,
            },
        }
    };
    spec.scene.validate()?;
    synth::write_synthetic_dataset(out, &spec)?;
    log::info!(
        "wrote {} scenes ({}x{}) to {}",
        spec.n_images,
        spec.scene.canvas_w,
        spec.scene.canvas_h,
        out.display()
    );
    Ok(())
}
