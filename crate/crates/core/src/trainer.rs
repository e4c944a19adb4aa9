//! Weight-shared two-branch training loop: the same backbone and heads see
//! the original image and an affine-transformed copy, and the equivariance,
//! consistency, attention-MIL and CAM-classification losses are minimized
//! jointly with plain SGD.

use crate::affine::{apply_affine_g, ecr_loss_g, er_loss_g, AffineSpec};
use crate::autodiff::{Tape, Var};
use crate::cam::{cam_to_logits_g, normalize_cam_g, pixel_correlation_g, project_1x1_g, refine_cam_g};
use crate::data::{AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::mil::{apply_attention_g, attention_weights_g, build_instance_bag_g, mil_classify_g};
use crate::model::{forward_backbone_g, BoundModel, ModelParams};
use crate::objective::{
    cross_entropy_g, encode_labels, multilabel_soft_margin_g, LossBreakdown, LossWeights,
};
use ndarray::{Array1, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Learning-rate multiplier for the newly initialized heads
    /// (CAM projection, embedding, fusion, attention, classifier).
    pub head_lr_multiplier: f64,
    /// Polynomial decay exponent of the per-step schedule.
    pub decay_power: f64,
    /// L2 weight decay, applied to weight matrices only.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Transform fed to the second branch.
    pub affine: AffineSpec,
    pub seed: u64,
    /// Weights of (cam classification, equivariance, consistency, bag CE).
    pub loss_weights: LossWeights,
    /// Compute affinity-refined maps and the consistency term.
    pub refinement: bool,
    /// Compute the attention-MIL head and its cross-entropy term.
    pub mil: bool,
    /// Include the always-on background class in the soft-margin loss.
    pub include_background: bool,
    /// Optional stochastic augmentation applied per epoch.
    pub augment: Option<AugmentConfig>,
    /// Global gradient-norm cap; disabled when not finite or <= 0.
    pub clip_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            head_lr_multiplier: 10.0,
            decay_power: 0.9,
            weight_decay: 0.0005,
            batch_size: 3,
            epochs: 10,
            affine: AffineSpec::Rescale { scale_factor: 0.4 },
            seed: 0,
            loss_weights: [1.0, 1.0, 1.0, 1.0],
            refinement: true,
            mil: true,
            include_background: false,
            augment: None,
            clip_grad_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn forward(&self) -> ForwardSettings {
        ForwardSettings {
            affine: self.affine.clone(),
            refinement: self.refinement,
            mil: self.mil,
        }
    }
}

/// The subset of the config needed to run the two-branch forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardSettings {
    pub affine: AffineSpec,
    pub refinement: bool,
    pub mil: bool,
}

impl Default for ForwardSettings {
    fn default() -> Self {
        TrainConfig::default().forward()
    }
}

/// Polynomial learning-rate decay: `base * (1 - step/total)^power`.
pub fn lr_schedule(base_lr: f64, power: f64, step: usize, total: usize) -> Result<f64> {
    if step >= total {
        return Err(Error::ScheduleExhausted { step, total });
    }
    Ok(base_lr * (1.0 - step as f64 / total as f64).powf(power))
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

/// Handles to every intermediate of one two-branch forward pass.
pub struct SiameseVars {
    pub cam_orig: Var,
    pub cam_af: Var,
    pub cam_rm_orig: Option<Var>,
    pub cam_rm_af: Option<Var>,
    pub logits_orig: Var,
    pub logits_af: Var,
    pub mil_probs: Option<Var>,
    pub attention: Option<Var>,
}

/// Builds both branches on one tape with a single set of parameter leaves,
/// so gradients from the two branches accumulate into shared weights.
pub fn forward_siamese_g(
    t: &mut Tape,
    bound: &BoundModel,
    image: &Array3<f64>,
    settings: &ForwardSettings,
) -> Result<SiameseVars> {
    let x1 = t.leaf(image.clone().into_dyn());
    let x2 = apply_affine_g(t, x1, &settings.affine)?;

    let f1 = forward_backbone_g(t, &bound.backbone, x1)?;
    let f2 = forward_backbone_g(t, &bound.backbone, x2)?;

    let raw1 = project_1x1_g(t, f1, bound.cam_projection);
    let raw2 = project_1x1_g(t, f2, bound.cam_projection);
    let cam1 = normalize_cam_g(t, raw1);
    let cam2 = normalize_cam_g(t, raw2);
    let logits1 = cam_to_logits_g(t, raw1);
    let logits2 = cam_to_logits_g(t, raw2);

    let (rm1, rm2) = if settings.refinement {
        let e1 = project_1x1_g(t, f1, bound.embedding);
        let e2 = project_1x1_g(t, f2, bound.embedding);
        let c1 = pixel_correlation_g(t, e1);
        let c2 = pixel_correlation_g(t, e2);
        (Some(refine_cam_g(t, cam1, c1)), Some(refine_cam_g(t, cam2, c2)))
    } else {
        (None, None)
    };

    let (probs, attention) = if settings.mil {
        let bag = build_instance_bag_g(t, f1, f2, &settings.affine, bound.fuse)?;
        let bs = t.value(bag).shape().to_vec();
        let att = attention_weights_g(t, bag, bound.w1, bound.w2);
        let flat = t.reshape(bag, &[bs[0], bs[1] * bs[2]]);
        let gated = apply_attention_g(t, flat, att);
        let p = mil_classify_g(t, gated, bound.classifier, bound.classifier_bias);
        (Some(p), Some(att))
    } else {
        (None, None)
    };

    Ok(SiameseVars {
        cam_orig: cam1,
        cam_af: cam2,
        cam_rm_orig: rm1,
        cam_rm_af: rm2,
        logits_orig: logits1,
        logits_af: logits2,
        mil_probs: probs,
        attention,
    })
}

/// Weighted scalar objective plus the per-term values.
pub fn loss_g(
    t: &mut Tape,
    fwd: &SiameseVars,
    is_rdr: bool,
    settings: &ForwardSettings,
    weights: &LossWeights,
    include_background: bool,
) -> Result<(Var, LossBreakdown)> {
    let labels = encode_labels(is_rdr);
    let mc1 = multilabel_soft_margin_g(t, fwd.logits_orig, &labels, include_background);
    let mc2 = multilabel_soft_margin_g(t, fwd.logits_af, &labels, include_background);
    let mc_sum = t.add(mc1, mc2);
    let mc = t.scale(mc_sum, 0.5);

    let er = er_loss_g(t, fwd.cam_orig, fwd.cam_af, &settings.affine)?;
    let ecr = match (fwd.cam_rm_orig, fwd.cam_rm_af) {
        (Some(rm1), Some(rm2)) => {
            ecr_loss_g(t, fwd.cam_orig, rm1, fwd.cam_af, rm2, &settings.affine)?
        }
        _ => t.leaf_scalar(0.0),
    };
    let ce = match fwd.mil_probs {
        Some(p) => cross_entropy_g(t, p, is_rdr),
        None => t.leaf_scalar(0.0),
    };

    let mut parts = LossBreakdown {
        multi_class: t.scalar(mc),
        er: t.scalar(er),
        ecr: t.scalar(ecr),
        cross_entropy: t.scalar(ce),
        total: 0.0,
    };
    crate::objective::total_loss(&mut parts, weights);

    let wmc = t.scale(mc, weights[0]);
    let wer = t.scale(er, weights[1]);
    let wecr = t.scale(ecr, weights[2]);
    let wce = t.scale(ce, weights[3]);
    let s1 = t.add(wmc, wer);
    let s2 = t.add(wecr, wce);
    let total = t.add(s1, s2);
    Ok((total, parts))
}

// ---------------------------------------------------------------------------
// Pure forward passes (evaluation / export)
// ---------------------------------------------------------------------------

/// Arrays extracted from one two-branch forward pass.
#[derive(Debug, Clone)]
pub struct SiameseOutputs {
    pub cam_orig: Array3<f64>,
    pub cam_af: Array3<f64>,
    pub cam_refined_orig: Option<Array3<f64>>,
    pub cam_refined_af: Option<Array3<f64>>,
    pub logits_orig: Array1<f64>,
    pub mil_probs: Option<[f64; 2]>,
    pub attention: Option<Array1<f64>>,
}

pub fn forward_siamese(
    params: &ModelParams,
    image: &Array3<f64>,
    settings: &ForwardSettings,
) -> Result<SiameseOutputs> {
    let mut t = Tape::new();
    let bound = params.bind(&mut t);
    let fwd = forward_siamese_g(&mut t, &bound, image, settings)?;
    let to3 = |t: &Tape, v: Var| -> Array3<f64> {
        t.value(v)
            .clone()
            .into_dimensionality()
            .expect("3-d activation map")
    };
    Ok(SiameseOutputs {
        cam_orig: to3(&t, fwd.cam_orig),
        cam_af: to3(&t, fwd.cam_af),
        cam_refined_orig: fwd.cam_rm_orig.map(|v| to3(&t, v)),
        cam_refined_af: fwd.cam_rm_af.map(|v| to3(&t, v)),
        logits_orig: t
            .value(fwd.logits_orig)
            .clone()
            .into_dimensionality()
            .expect("logit vector"),
        mil_probs: fwd.mil_probs.map(|v| {
            let p = t.value(v);
            [p[[0]], p[[1]]]
        }),
        attention: fwd
            .attention
            .map(|v| t.value(v).clone().into_dimensionality().expect("attention vector")),
    })
}

/// A referability score in [0,1]: the bag posterior when the MIL head is
/// active, otherwise the sigmoid of the lesion-channel CAM logit.
pub fn predict_score(outputs: &SiameseOutputs) -> f64 {
    match outputs.mil_probs {
        Some(p) => p[1],
        None => 1.0 / (1.0 + (-outputs.logits_orig[1]).exp()),
    }
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct PerImage {
    parts: LossBreakdown,
    grads: Vec<ArrayD<f64>>,
}

fn image_gradients(
    params: &ModelParams,
    sample_image: &Array3<f64>,
    is_rdr: bool,
    settings: &ForwardSettings,
    weights: &LossWeights,
    include_background: bool,
    step: usize,
) -> Result<PerImage> {
    let mut t = Tape::new();
    let bound = params.bind(&mut t);
    let fwd = forward_siamese_g(&mut t, &bound, sample_image, settings)?;
    let (total, parts) = loss_g(&mut t, &fwd, is_rdr, settings, weights, include_background)?;
    if !parts.total.is_finite() {
        return Err(Error::NanLoss { step, checkpoint: "none".into() });
    }
    let grads = t.backward(total);
    let grads = bound
        .bindings
        .iter()
        .map(|(_, v)| {
            grads[v.id()]
                .clone()
                .map(|g| g.as_standard_layout().to_owned())
                .unwrap_or_else(|| ArrayD::zeros(t.value(*v).raw_dim()))
        })
        .collect();
    Ok(PerImage { parts, grads })
}

/// One SGD step over a mini-batch. Per-image gradients are computed in
/// parallel and reduced in batch order so results are bit-reproducible.
pub fn training_step(
    params: &mut ModelParams,
    batch: &[Sample],
    cfg: &TrainConfig,
    step: usize,
    total_steps: usize,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let lr = lr_schedule(cfg.base_lr, cfg.decay_power, step, total_steps)?;
    let settings = cfg.forward();

    let per_image: Vec<PerImage> = batch
        .par_iter()
        .map(|s| {
            image_gradients(
                params,
                &s.image,
                s.is_rdr,
                &settings,
                &cfg.loss_weights,
                cfg.include_background,
                step,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let inv_n = 1.0 / batch.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut grads: Vec<ArrayD<f64>> = per_image[0].grads.clone();
    for pi in per_image.iter().skip(1) {
        for (acc, g) in grads.iter_mut().zip(&pi.grads) {
            *acc += g;
        }
    }
    for pi in &per_image {
        mean.multi_class += pi.parts.multi_class * inv_n;
        mean.er += pi.parts.er * inv_n;
        mean.ecr += pi.parts.ecr * inv_n;
        mean.cross_entropy += pi.parts.cross_entropy * inv_n;
        mean.total += pi.parts.total * inv_n;
    }

    // clip the global norm of the batch-mean gradient before decay
    let mut scale = inv_n;
    if cfg.clip_grad_norm.is_finite() && cfg.clip_grad_norm > 0.0 {
        let sq_sum: f64 = grads
            .iter()
            .map(|g| g.iter().map(|v| (v * inv_n).powi(2)).sum::<f64>())
            .sum();
        let norm = sq_sum.sqrt();
        if norm > cfg.clip_grad_norm {
            scale *= cfg.clip_grad_norm / norm;
        }
    }

    let mut idx = 0usize;
    params.for_each_param_mut(|meta, w| {
        let mut g = grads[idx].mapv(|v| v * scale);
        idx += 1;
        if meta.decay {
            g.zip_mut_with(w, |gv, wv| *gv += cfg.weight_decay * *wv);
        }
        let rate = lr * if meta.backbone { 1.0 } else { cfg.head_lr_multiplier };
        w.zip_mut_with(&g, |wv, gv| *wv -= rate * gv);
    });
    debug_assert_eq!(idx, grads.len());
    Ok(mean)
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

/// One line of the JSONL metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Full training run: seeded shuffling per epoch, optional augmentation,
/// one JSONL metrics line per step, optional per-epoch checkpoints.
pub fn fit(
    params: &mut ModelParams,
    data: &[Sample],
    cfg: &TrainConfig,
    metrics_out: &mut dyn Write,
    checkpoint_dir: Option<&Path>,
) -> Result<FitSummary> {
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let n_batches = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * n_batches;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0usize;
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    match &cfg.augment {
                        Some(acfg) => {
                            let image = crate::data::augment(&s.image, acfg, &mut rng);
                            Sample { image, ..s.clone() }
                        }
                        None => s.clone(),
                    }
                })
                .collect();
            let lr = lr_schedule(cfg.base_lr, cfg.decay_power, step, total_steps)?;
            let losses = training_step(params, &batch, cfg, step, total_steps)?;
            if first_loss.is_nan() {
                first_loss = losses.total;
            }
            final_loss = losses.total;
            let record = StepRecord { step, epoch, lr, losses };
            serde_json::to_writer(&mut *metrics_out, &record)?;
            metrics_out.write_all(b"\n")?;
            step += 1;
        }
        if let Some(dir) = checkpoint_dir {
            let ckpt = Checkpoint::new(cfg, params, step, rng.get_word_pos());
            save_checkpoint(&dir.join(format!("epoch_{epoch:04}.json")), &ckpt)?;
        }
    }
    Ok(FitSummary { steps: step, first_loss, final_loss })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub step: usize,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn new(cfg: &TrainConfig, params: &ModelParams, step: usize, word_pos: u128) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            params: params.clone(),
            step,
            rng_seed: cfg.seed,
            rng_word_pos: word_pos,
        }
    }

    /// Restores the training RNG at the exact stream position it was saved.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string(ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    Ok(ckpt)
}
