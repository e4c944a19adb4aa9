//! Command-line front end: synthetic data generation, training, evaluation,
//! heatmap export and gradient verification.
//!
//! Every flag can also be given in a flat `key=value` config file passed with
//! `--config`; explicit flags win over file entries. The dataset directory
//! may be given relative to the `SEAMIL_DATA_ROOT` environment variable.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use seamil_core::data::{self, BackgroundTexture, Sample, SynthConfig};
use seamil_core::metrics::{self, MetricsReport};
use seamil_core::model::{BackboneKind, HeadDims, ModelParams};
use seamil_core::trainer::{self, Checkpoint, ForwardSettings, TrainConfig};
use seamil_core::AffineSpec;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const DATA_ROOT_ENV: &str = "SEAMIL_DATA_ROOT";

#[derive(Parser)]
#[command(name = "seamil", version, about = "Weakly-supervised referable-DR toolkit")]
struct Cli {
    /// Flat key=value config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic blob-lesion dataset directory.
    SynthData(SynthArgs),
    /// Train the two-branch model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and emit a metrics report.
    Eval(EvalArgs),
    /// Export activation-map overlays and raw-value sidecars.
    ExportCam(ExportArgs),
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck,
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    positive_fraction: Option<f64>,
    #[arg(long)]
    lesion_count_min: Option<usize>,
    #[arg(long)]
    lesion_count_max: Option<usize>,
    #[arg(long)]
    lesion_radius_min: Option<f64>,
    #[arg(long)]
    lesion_radius_max: Option<f64>,
    #[arg(long, value_enum)]
    background: Option<Background>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Background {
    Flat,
    Vignette,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset directory (absolute, or relative to SEAMIL_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for metrics.jsonl and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    backbone: Option<Backbone>,
    /// Backbone output channel width (>= 8).
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    head_lr_multiplier: Option<f64>,
    #[arg(long)]
    decay_power: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Affine transform applied to the second branch.
    #[arg(long, value_enum)]
    affine: Option<AffineKind>,
    /// Rescale factor of the second branch (rescale affine only).
    #[arg(long)]
    scale_factor: Option<f64>,
    /// Global gradient-norm cap (<= 0 disables clipping).
    #[arg(long)]
    clip_grad_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weights of the cam-classification, ER, ECR and bag-CE terms.
    #[arg(long, num_args = 4)]
    loss_weights: Option<Vec<f64>>,
    /// Disable the attention-MIL head.
    #[arg(long)]
    no_mil: bool,
    /// Disable affinity refinement (and with it the consistency term).
    #[arg(long)]
    no_refinement: bool,
    /// Apply stochastic augmentation each epoch.
    #[arg(long)]
    augment: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AffineKind {
    Rescale,
    Hflip,
    Vflip,
    Rot90,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backbone {
    ToyCnn,
    Resnet38Like,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Where to write the JSON report (also printed to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Classification threshold on the lesion probability.
    #[arg(long)]
    threshold: Option<f64>,
    /// Binarization threshold for CAM-vs-mask segmentation scoring.
    #[arg(long)]
    cam_threshold: Option<f64>,
    /// Score maps without affinity refinement.
    #[arg(long)]
    unrefined: bool,
}

#[derive(clap::Args)]
struct ExportArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Image ids to export; all images when omitted.
    #[arg(long)]
    image_id: Vec<String>,
    /// Overlay opacity.
    #[arg(long)]
    alpha: Option<f64>,
    /// Export the unrefined map instead of the affinity-refined one.
    #[arg(long)]
    unrefined: bool,
}

// ---------------------------------------------------------------------------
// Config-file merging
// ---------------------------------------------------------------------------

fn read_config(path: Option<&Path>) -> Result<HashMap<String, String>> {
    let Some(path) = path else {
        return Ok(HashMap::new());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {} is not key=value: {line}", lineno + 1);
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Flag beats config file beats default.
fn pick<T: FromStr>(flag: Option<T>, cfg: &HashMap<String, String>, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match cfg.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|e| anyhow::anyhow!("config key {key}={raw}: {e}")),
        None => Ok(default),
    }
}

fn pick_flag(flag: bool, cfg: &HashMap<String, String>, key: &str) -> bool {
    flag || cfg.get(key).map(|v| v == "true" || v == "1").unwrap_or(false)
}

fn pick_path(
    flag: Option<PathBuf>,
    cfg: &HashMap<String, String>,
    key: &str,
) -> Option<PathBuf> {
    flag.or_else(|| cfg.get(key).map(PathBuf::from))
}

/// Resolves a dataset directory against the data-root environment variable.
fn resolve_data(dir: Option<PathBuf>) -> Result<PathBuf> {
    let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    match (dir, root) {
        (Some(p), Some(r)) if p.is_relative() => Ok(r.join(p)),
        (Some(p), _) => Ok(p),
        (None, Some(r)) => Ok(r),
        (None, None) => bail!("no dataset directory: pass --data or set {DATA_ROOT_ENV}"),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn run_synth(args: SynthArgs, cfg: &HashMap<String, String>) -> Result<()> {
    let out = pick_path(args.out, cfg, "out").context("synth-data needs --out")?;
    let d = SynthConfig::default();
    let background = match args.background {
        Some(Background::Flat) => BackgroundTexture::Flat,
        Some(Background::Vignette) => BackgroundTexture::Vignette,
        None => match cfg.get("background").map(String::as_str) {
            Some("flat") => BackgroundTexture::Flat,
            _ => d.background_texture,
        },
    };
    let synth = SynthConfig {
        n_images: pick(args.n_images, cfg, "n_images", d.n_images)?,
        image_size: pick(args.image_size, cfg, "image_size", d.image_size)?,
        positive_fraction: pick(args.positive_fraction, cfg, "positive_fraction", d.positive_fraction)?,
        lesion_count_min: pick(args.lesion_count_min, cfg, "lesion_count_min", d.lesion_count_min)?,
        lesion_count_max: pick(args.lesion_count_max, cfg, "lesion_count_max", d.lesion_count_max)?,
        lesion_radius_min: pick(args.lesion_radius_min, cfg, "lesion_radius_min", d.lesion_radius_min)?,
        lesion_radius_max: pick(args.lesion_radius_max, cfg, "lesion_radius_max", d.lesion_radius_max)?,
        background_texture: background,
        seed: pick(args.seed, cfg, "seed", d.seed)?,
    };
    let samples = data::generate_synthetic(&synth)?;
    data::write_synthetic_dir(&samples, &out)?;
    println!(
        "wrote {} images ({} positive) to {}",
        samples.len(),
        samples.iter().filter(|s| s.is_rdr).count(),
        out.display()
    );
    Ok(())
}

fn build_train_config(args: &TrainArgs, cfg: &HashMap<String, String>) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let scale = pick(args.scale_factor, cfg, "scale_factor", 0.4)?;
    let affine_kind = match args.affine {
        Some(k) => k,
        None => match cfg.get("affine").map(String::as_str) {
            Some("rescale") | None => AffineKind::Rescale,
            Some("hflip") => AffineKind::Hflip,
            Some("vflip") => AffineKind::Vflip,
            Some("rot90") => AffineKind::Rot90,
            Some(other) => bail!("unknown affine kind {other:?}"),
        },
    };
    let affine = match affine_kind {
        AffineKind::Rescale => AffineSpec::Rescale { scale_factor: scale },
        AffineKind::Hflip => AffineSpec::HFlip,
        AffineKind::Vflip => AffineSpec::VFlip,
        AffineKind::Rot90 => AffineSpec::Rotation { angle: 90 },
    };
    let weights = match &args.loss_weights {
        Some(w) => [w[0], w[1], w[2], w[3]],
        None => match cfg.get("loss_weights") {
            Some(raw) => {
                let parts: Vec<f64> = raw
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| anyhow::anyhow!("loss_weights={raw}: {e}"))?;
                if parts.len() != 4 {
                    bail!("loss_weights needs 4 comma-separated values");
                }
                [parts[0], parts[1], parts[2], parts[3]]
            }
            None => d.loss_weights,
        },
    };
    Ok(TrainConfig {
        base_lr: pick(args.base_lr, cfg, "base_lr", d.base_lr)?,
        head_lr_multiplier: pick(args.head_lr_multiplier, cfg, "head_lr_multiplier", d.head_lr_multiplier)?,
        decay_power: pick(args.decay_power, cfg, "decay_power", d.decay_power)?,
        weight_decay: pick(args.weight_decay, cfg, "weight_decay", d.weight_decay)?,
        batch_size: pick(args.batch_size, cfg, "batch_size", d.batch_size)?,
        epochs: pick(args.epochs, cfg, "epochs", d.epochs)?,
        affine,
        seed: pick(args.seed, cfg, "seed", d.seed)?,
        loss_weights: weights,
        refinement: !pick_flag(args.no_refinement, cfg, "no_refinement"),
        mil: !pick_flag(args.no_mil, cfg, "no_mil"),
        include_background: false,
        augment: pick_flag(args.augment, cfg, "augment").then(Default::default),
        clip_grad_norm: pick(args.clip_grad_norm, cfg, "clip_grad_norm", d.clip_grad_norm)?,
    })
}

fn run_train(args: TrainArgs, cfg: &HashMap<String, String>) -> Result<()> {
    let data_dir = resolve_data(pick_path(args.data.clone(), cfg, "data"))?;
    let out = pick_path(args.out.clone(), cfg, "out").context("train needs --out")?;
    let backbone = match args.backbone {
        Some(Backbone::ToyCnn) => BackboneKind::ToyCnn,
        Some(Backbone::Resnet38Like) => BackboneKind::Resnet38Like,
        None => match cfg.get("backbone").map(String::as_str) {
            Some("resnet38_like") => BackboneKind::Resnet38Like,
            _ => BackboneKind::ToyCnn,
        },
    };
    let channels = pick(args.channels, cfg, "channels", 64)?;
    let train_cfg = build_train_config(&args, cfg)?;

    let samples = data::load_synthetic_dir(&data_dir)?;
    if samples.is_empty() {
        bail!("no samples in {}", data_dir.display());
    }
    let in_channels = samples[0].image.dim().0;

    std::fs::create_dir_all(&out)?;
    let mut params = ModelParams::init(
        backbone,
        in_channels,
        channels,
        HeadDims::defaults(channels),
        train_cfg.seed,
    );
    let mut metrics_file = std::fs::File::create(out.join("metrics.jsonl"))?;
    let summary = trainer::fit(&mut params, &samples, &train_cfg, &mut metrics_file, Some(&out))?;
    let ckpt = Checkpoint::new(&train_cfg, &params, summary.steps, 0);
    trainer::save_checkpoint(&out.join("checkpoint.json"), &ckpt)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

struct Scored {
    prob: f64,
    label: bool,
    refined_iou: Option<f64>,
    refined_dice: Option<f64>,
}

fn score_sample(
    params: &ModelParams,
    settings: &ForwardSettings,
    sample: &Sample,
    cam_threshold: f64,
) -> Result<Scored> {
    let out = trainer::forward_siamese(params, &sample.image, settings)?;
    let prob = trainer::predict_score(&out);
    let (mut refined_iou, mut refined_dice) = (None, None);
    if let Some(mask) = &sample.mask {
        let map = out.cam_refined_orig.as_ref().unwrap_or(&out.cam_orig);
        let lesion = metrics::renormalize(&map.index_axis(ndarray::Axis(0), 1).to_owned());
        let (h, w) = mask.dim();
        let up = seamil_core::heatmap::upscale(&lesion, h, w);
        let pred = metrics::cam_to_segmentation(&up, cam_threshold);
        let score = metrics::segmentation_score(&pred, mask)?;
        refined_iou = Some(score.iou);
        refined_dice = Some(score.dice);
    }
    Ok(Scored { prob, label: sample.is_rdr, refined_iou, refined_dice })
}

fn run_eval(args: EvalArgs, cfg: &HashMap<String, String>) -> Result<()> {
    let data_dir = resolve_data(pick_path(args.data, cfg, "data"))?;
    let ckpt_path = pick_path(args.checkpoint, cfg, "checkpoint").context("eval needs --checkpoint")?;
    let threshold = pick(args.threshold, cfg, "threshold", 0.5)?;
    let cam_threshold = pick(args.cam_threshold, cfg, "cam_threshold", 0.5)?;

    let ckpt = trainer::load_checkpoint(&ckpt_path)?;
    let mut settings = ckpt.config.forward();
    if args.unrefined || pick_flag(false, cfg, "unrefined") {
        settings.refinement = false;
    }
    let samples = data::load_synthetic_dir(&data_dir)?;

    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut ious = Vec::new();
    let mut dices = Vec::new();
    for s in &samples {
        let scored = score_sample(&ckpt.params, &settings, s, cam_threshold)?;
        probs.push(scored.prob);
        labels.push(scored.label);
        // CAM quality is judged where lesions actually exist
        if scored.label {
            if let Some(iou) = scored.refined_iou {
                ious.push(iou);
                dices.push(scored.refined_dice.unwrap());
            }
        }
    }
    let (accuracy, f1) = metrics::accuracy_f1(&probs, &labels, threshold)?;
    let report = MetricsReport {
        auroc: metrics::auroc(&probs, &labels)?,
        accuracy,
        f1,
        n_samples: samples.len(),
        mean_iou: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
        mean_dice: (!dices.is_empty()).then(|| dices.iter().sum::<f64>() / dices.len() as f64),
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = args.report {
        std::fs::write(path, &json)?;
    }
    Ok(())
}

fn run_export(args: ExportArgs, cfg: &HashMap<String, String>) -> Result<()> {
    let data_dir = resolve_data(pick_path(args.data, cfg, "data"))?;
    let ckpt_path = pick_path(args.checkpoint, cfg, "checkpoint").context("export-cam needs --checkpoint")?;
    let out = pick_path(args.out, cfg, "out").context("export-cam needs --out")?;
    let alpha = pick(args.alpha, cfg, "alpha", 0.5)?;

    let ckpt = trainer::load_checkpoint(&ckpt_path)?;
    let settings = ckpt.config.forward();
    let samples = data::load_synthetic_dir(&data_dir)?;
    std::fs::create_dir_all(&out)?;

    let mut exported = 0usize;
    for s in &samples {
        if !args.image_id.is_empty() && !args.image_id.iter().any(|id| id == &s.id) {
            continue;
        }
        let fwd = trainer::forward_siamese(&ckpt.params, &s.image, &settings)?;
        let map = if args.unrefined {
            &fwd.cam_orig
        } else {
            fwd.cam_refined_orig.as_ref().unwrap_or(&fwd.cam_orig)
        };
        let lesion = metrics::renormalize(&map.index_axis(ndarray::Axis(0), 1).to_owned());
        seamil_core::heatmap::export_heatmap(
            &out.join(format!("{}.png", s.id)),
            &s.image,
            &lesion,
            alpha,
        )?;
        exported += 1;
    }
    if exported == 0 {
        bail!("no matching images");
    }
    println!("exported {exported} heatmaps to {}", out.display());
    Ok(())
}

fn run_gradcheck() -> Result<()> {
    let mut failed = false;
    for report in seamil_core::gradcheck::standard_suite() {
        let status = if report.passed() { "pass" } else { "FAIL" };
        println!(
            "{status}  {:<28} max rel err {:>10.3e} over {} elements (tolerance {:.0e})",
            report.name, report.max_rel_error, report.n_elements, report.tolerance
        );
        failed |= !report.passed();
    }
    if failed {
        bail!("gradient check failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = read_config(cli.config.as_deref())?;
    match cli.command {
        Command::SynthData(args) => run_synth(args, &cfg),
        Command::Train(args) => run_train(args, &cfg),
        Command::Eval(args) => run_eval(args, &cfg),
        Command::ExportCam(args) => run_export(args, &cfg),
        Command::Gradcheck => run_gradcheck(),
    }
}
