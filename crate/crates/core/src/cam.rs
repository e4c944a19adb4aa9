//! Class activation maps: projection head, pixel-affinity refinement, pooling.
//!
//! The refinement step replaces each spatial cell of the CAM with the
//! affinity-weighted average of all cells, where affinities are ReLU-clamped
//! cosine similarities between embedded feature vectors.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3, ArrayD};

/// Denominator floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;
/// Additive floor for per-class max normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Backbone output: channels x height x width at a given input stride.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: usize) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data, stride }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamKind {
    Original,
    Refined,
}

/// Per-class spatial activation map (background + lesion channels).
#[derive(Debug, Clone)]
pub struct ActivationMap {
    pub data: Array3<f64>,
    pub kind: CamKind,
    pub normalized: bool,
}

impl ActivationMap {
    pub fn classes(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// ReLU-clamped cosine-similarity matrix over flattened spatial cells.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub data: Array2<f64>,
    pub row_sums: Array1<f64>,
}

/// 1x1-convolution weights of the CAM head.
///
/// `projection` maps backbone channels to class channels; `embedding` is the
/// channel-reducing function feeding the correlation matrix.
#[derive(Debug, Clone)]
pub struct CamHeadParams {
    pub projection: Array2<f64>, // [C, L]
    pub embedding: Array2<f64>,  // [E, L]
}

fn check_channels(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension(format!(
            "{what}: weights expect {expected} input channels, feature map has {got}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Graph-level building blocks (shared by the pure API and the trainer)
// ---------------------------------------------------------------------------

/// 1x1 projection of features [L,H,W] by weights [C,L] -> [C,H,W].
pub fn project_1x1_g(t: &mut Tape, features: Var, weights: Var) -> Var {
    let fs = t.value(features).shape().to_vec();
    let (l, h, w) = (fs[0], fs[1], fs[2]);
    let c = t.value(weights).shape()[0];
    let flat = t.reshape(features, &[l, h * w]);
    let out = t.matmul(weights, flat);
    t.reshape(out, &[c, h, w])
}

/// ReLU then divide each class channel by its spatial max plus [`NORM_EPS`].
pub fn normalize_cam_g(t: &mut Tape, cam: Var) -> Var {
    let r = t.relu(cam);
    let m = t.spatial_max(r);
    let m_eps = t.add_scalar(m, NORM_EPS);
    t.div_channel(r, m_eps)
}

/// ReLU-clamped cosine correlation of embedded features [E,H,W] -> [HW,HW].
pub fn pixel_correlation_g(t: &mut Tape, embedded: Var) -> Var {
    let es = t.value(embedded).shape().to_vec();
    let (e, hw) = (es[0], es[1] * es[2]);
    let flat = t.reshape(embedded, &[e, hw]);
    let flat_t = t.transpose2(flat);
    let numer = t.matmul(flat_t, flat);
    let sq = t.square(flat);
    let col_sq = t.sum_axis(sq, 0);
    let norms = t.sqrt(col_sq);
    let col = t.reshape(norms, &[hw, 1]);
    let row = t.reshape(norms, &[1, hw]);
    let denom = t.matmul(col, row);
    let denom = t.clamp_min(denom, COSINE_EPS);
    let cos = t.div(numer, denom);
    let clamped = t.relu(cos);
    t.set_diag_one(clamped)
}

/// Affinity-weighted average: refined[c,i] = sum_j corr[i,j] cam[c,j] / sum_j corr[i,j].
pub fn refine_cam_g(t: &mut Tape, cam: Var, corr: Var) -> Var {
    let cs = t.value(cam).shape().to_vec();
    let (c, h, w) = (cs[0], cs[1], cs[2]);
    let hw = h * w;
    let flat = t.reshape(cam, &[c, hw]);
    let corr_t = t.transpose2(corr);
    let weighted = t.matmul(flat, corr_t);
    let row_sums = t.sum_axis(corr, 1);
    let ones = t.leaf(ArrayD::from_elem(ndarray::IxDyn(&[hw]), 1.0));
    let inv = t.div(ones, row_sums);
    let out = t.mul_cols(weighted, inv);
    t.reshape(out, &[c, h, w])
}

/// Adaptive average pool to 1x1: [C,H,W] -> [C].
pub fn cam_to_logits_g(t: &mut Tape, cam: Var) -> Var {
    t.spatial_mean(cam)
}

// ---------------------------------------------------------------------------
// Pure API
// ---------------------------------------------------------------------------

/// Projects backbone features to per-class activation maps.
pub fn compute_cam(
    features: &FeatureMap,
    head: &CamHeadParams,
    normalize: bool,
) -> Result<ActivationMap> {
    check_channels(head.projection.ncols(), features.channels(), "compute_cam")?;
    let mut t = Tape::new();
    let f = t.leaf(features.data.clone().into_dyn());
    let w = t.leaf(head.projection.clone().into_dyn());
    let mut cam = project_1x1_g(&mut t, f, w);
    if normalize {
        cam = normalize_cam_g(&mut t, cam);
    }
    Ok(ActivationMap {
        data: to3(t.value(cam)),
        kind: CamKind::Original,
        normalized: normalize,
    })
}

/// Reduces feature channels through the embedding 1x1 convolution.
pub fn embed_features(features: &FeatureMap, head: &CamHeadParams) -> Result<FeatureMap> {
    check_channels(head.embedding.ncols(), features.channels(), "embed_features")?;
    let mut t = Tape::new();
    let f = t.leaf(features.data.clone().into_dyn());
    let w = t.leaf(head.embedding.clone().into_dyn());
    let out = project_1x1_g(&mut t, f, w);
    Ok(FeatureMap::new(to3(t.value(out)), features.stride))
}

/// ReLU-clamped cosine similarity between all pairs of embedded spatial cells.
///
/// Zero embedding vectors yield 0 off-diagonal and 1 on the diagonal.
pub fn pixel_correlation(embedded: &FeatureMap) -> CorrelationMatrix {
    let mut t = Tape::new();
    let e = t.leaf(embedded.data.clone().into_dyn());
    let corr = pixel_correlation_g(&mut t, e);
    let data = t
        .value(corr)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let row_sums = data.sum_axis(ndarray::Axis(1));
    CorrelationMatrix { data, row_sums }
}

/// Refines a CAM by the affinity-weighted average over the correlation matrix.
pub fn refine_cam(cam: &ActivationMap, corr: &CorrelationMatrix) -> Result<ActivationMap> {
    let (h, w) = cam.spatial();
    if corr.data.nrows() != h * w {
        return Err(Error::Dimension(format!(
            "refine_cam: correlation is {}x{}, CAM has {} cells",
            corr.data.nrows(),
            corr.data.ncols(),
            h * w
        )));
    }
    if let Some(row) = corr.row_sums.iter().position(|&s| s <= 0.0) {
        return Err(Error::DegenerateAffinity { row });
    }
    let mut t = Tape::new();
    let c = t.leaf(cam.data.clone().into_dyn());
    let m = t.leaf(corr.data.clone().into_dyn());
    let out = refine_cam_g(&mut t, c, m);
    Ok(ActivationMap {
        data: to3(t.value(out)),
        kind: CamKind::Refined,
        normalized: cam.normalized,
    })
}

/// Classification logits from a raw (un-normalized) CAM: spatial mean per class.
pub fn cam_to_logits(cam: &ActivationMap) -> Array1<f64> {
    let (c, h, w) = cam.data.dim();
    let hw = (h * w) as f64;
    Array1::from_iter(
        (0..c).map(|ci| cam.data.index_axis(ndarray::Axis(0), ci).sum() / hw),
    )
}

fn to3(a: &ArrayD<f64>) -> Array3<f64> {
    a.clone().into_dimensionality::<ndarray::Ix3>().unwrap()
}
