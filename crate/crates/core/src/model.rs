//! Backbone networks and the full parameter set of the Siamese model.
//!
//! `toy_cnn` is a four-stage CNN with output stride 8, sized so the whole
//! training loop runs on a CPU in minutes. `resnet38_like` is a deeper
//! residual variant behind the same interface.

use crate::autodiff::{Tape, Var};
use crate::cam::CamHeadParams;
use crate::error::{Error, Result};
use crate::mil::MilParams;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ToyCnn,
    Resnet38Like,
}

/// Architecture summary of the backbone.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Output channel count L.
    pub out_channels: usize,
    /// Input pixels per output feature cell.
    pub out_stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvLayer {
    /// [out, in, kh, kw]
    pub weight: ArrayD<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub shortcut: Option<ConvLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BackboneParams {
    Toy(Vec<ConvLayer>),
    ResnetLike {
        stem: ConvLayer,
        blocks: Vec<ResidualBlock>,
    },
}

/// Every learnable tensor of the model: backbone, CAM head, MIL head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: BackboneSpec,
    pub in_channels: usize,
    pub backbone: BackboneParams,
    /// CAM projection [2, L].
    pub cam_projection: Array2<f64>,
    /// Correlation embedding [E, L], E = L/4 by default.
    pub embedding: Array2<f64>,
    /// MIL fuse [K, 2L].
    pub fuse: Array2<f64>,
    /// Attention vector [D].
    pub w1: Array1<f64>,
    /// Attention matrix [D, K].
    pub w2: Array2<f64>,
    /// MIL classifier [2, K].
    pub classifier: Array2<f64>,
    pub classifier_bias: Array1<f64>,
}

/// Width hyper-parameters of the non-backbone heads.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeadDims {
    pub embedding_channels: usize,
    pub mil_channels: usize,
    pub attention_dim: usize,
}

impl HeadDims {
    pub fn defaults(l: usize) -> Self {
        Self {
            embedding_channels: (l / 4).max(1),
            mil_channels: 128,
            attention_dim: 64,
        }
    }
}

fn conv(rng: &mut ChaCha8Rng, out: usize, inp: usize, stride: usize) -> ConvLayer {
    let std = (2.0 / (inp * 9) as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ConvLayer {
        weight: ArrayD::from_shape_fn(IxDyn(&[out, inp, 3, 3]), |_| dist.sample(rng)),
        bias: Array1::zeros(out),
        stride,
    }
}

fn dense(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let std = (1.0 / cols as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl ModelParams {
    /// Seeded initialization of all parameters.
    pub fn init(
        kind: BackboneKind,
        in_channels: usize,
        out_channels: usize,
        dims: HeadDims,
        seed: u64,
    ) -> Self {
        assert!(out_channels >= 8, "backbone output width must be >= 8");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = out_channels;
        let backbone = match kind {
            BackboneKind::ToyCnn => BackboneParams::Toy(vec![
                conv(&mut rng, 16, in_channels, 2),
                conv(&mut rng, 32, 16, 2),
                conv(&mut rng, l, 32, 2),
                conv(&mut rng, l, l, 1),
            ]),
            BackboneKind::Resnet38Like => {
                let widths = [32usize, 64, 128, l];
                let stem = conv(&mut rng, widths[0], in_channels, 1);
                let mut blocks = Vec::new();
                for s in 0..3 {
                    let (ci, co) = (widths[s], widths[s + 1]);
                    blocks.push(ResidualBlock {
                        conv1: conv(&mut rng, co, ci, 2),
                        conv2: conv(&mut rng, co, co, 1),
                        shortcut: Some(conv(&mut rng, co, ci, 2)),
                    });
                    blocks.push(ResidualBlock {
                        conv1: conv(&mut rng, co, co, 1),
                        conv2: conv(&mut rng, co, co, 1),
                        shortcut: None,
                    });
                }
                BackboneParams::ResnetLike { stem, blocks }
            }
        };
        let e = dims.embedding_channels;
        let k = dims.mil_channels;
        let d = dims.attention_dim;
        Self {
            spec: BackboneSpec {
                kind,
                out_channels: l,
                out_stride: 8,
            },
            in_channels,
            backbone,
            cam_projection: dense(&mut rng, 2, l),
            embedding: dense(&mut rng, e, l),
            fuse: dense(&mut rng, k, 2 * l),
            w1: Array1::from_iter(dense(&mut rng, 1, d).into_iter()),
            w2: dense(&mut rng, d, k),
            classifier: dense(&mut rng, 2, k),
            classifier_bias: Array1::zeros(2),
        }
    }

    pub fn cam_head(&self) -> CamHeadParams {
        CamHeadParams {
            projection: self.cam_projection.clone(),
            embedding: self.embedding.clone(),
        }
    }

    pub fn mil_params(&self) -> MilParams {
        MilParams {
            fuse: self.fuse.clone(),
            w1: self.w1.clone(),
            w2: self.w2.clone(),
            classifier: self.classifier.clone(),
            classifier_bias: self.classifier_bias.clone(),
        }
    }

    /// Visits every parameter tensor in a fixed order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(ParamMeta, &mut ArrayD<f64>)) {
        match &mut self.backbone {
            BackboneParams::Toy(layers) => {
                for (i, layer) in layers.iter_mut().enumerate() {
                    f(ParamMeta::backbone_weight(format!("backbone.conv{i}.weight")), &mut layer.weight);
                    let mut b = layer.bias.clone().into_dyn();
                    f(ParamMeta::backbone_bias(format!("backbone.conv{i}.bias")), &mut b);
                    layer.bias = b.into_dimensionality().unwrap();
                }
            }
            BackboneParams::ResnetLike { stem, blocks } => {
                visit_conv_mut(&mut f, "backbone.stem", stem);
                for (i, block) in blocks.iter_mut().enumerate() {
                    visit_conv_mut(&mut f, &format!("backbone.block{i}.conv1"), &mut block.conv1);
                    visit_conv_mut(&mut f, &format!("backbone.block{i}.conv2"), &mut block.conv2);
                    if let Some(sc) = &mut block.shortcut {
                        visit_conv_mut(&mut f, &format!("backbone.block{i}.shortcut"), sc);
                    }
                }
            }
        }
        visit_2d_mut(&mut f, "cam.projection", &mut self.cam_projection);
        visit_2d_mut(&mut f, "cam.embedding", &mut self.embedding);
        visit_2d_mut(&mut f, "mil.fuse", &mut self.fuse);
        {
            let mut v = self.w1.clone().into_dyn();
            f(ParamMeta::head_vector("mil.w1".into()), &mut v);
            self.w1 = v.into_dimensionality().unwrap();
        }
        visit_2d_mut(&mut f, "mil.w2", &mut self.w2);
        visit_2d_mut(&mut f, "mil.classifier", &mut self.classifier);
        {
            let mut v = self.classifier_bias.clone().into_dyn();
            f(ParamMeta::head_bias("mil.classifier_bias".into()), &mut v);
            self.classifier_bias = v.into_dimensionality().unwrap();
        }
    }
}

fn visit_conv_mut(
    f: &mut impl FnMut(ParamMeta, &mut ArrayD<f64>),
    name: &str,
    layer: &mut ConvLayer,
) {
    f(ParamMeta::backbone_weight(format!("{name}.weight")), &mut layer.weight);
    let mut b = layer.bias.clone().into_dyn();
    f(ParamMeta::backbone_bias(format!("{name}.bias")), &mut b);
    layer.bias = b.into_dimensionality().unwrap();
}

fn visit_2d_mut(
    f: &mut impl FnMut(ParamMeta, &mut ArrayD<f64>),
    name: &str,
    arr: &mut Array2<f64>,
) {
    let mut v = arr.clone().into_dyn();
    f(ParamMeta::head_weight(name.to_string()), &mut v);
    *arr = v.into_dimensionality().unwrap();
}

/// Optimizer-relevant metadata of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub backbone: bool,
    /// Weight decay applies to weights only, not biases or attention vectors.
    pub decay: bool,
}

impl ParamMeta {
    fn new(name: String, backbone: bool, decay: bool) -> Self {
        Self { name, backbone, decay }
    }
    fn backbone_weight(name: String) -> Self {
        Self::new(name, true, true)
    }
    fn backbone_bias(name: String) -> Self {
        Self::new(name, true, false)
    }
    fn head_weight(name: String) -> Self {
        Self::new(name, false, true)
    }
    fn head_bias(name: String) -> Self {
        Self::new(name, false, false)
    }
    fn head_vector(name: String) -> Self {
        Self::new(name, false, false)
    }
}

// ---------------------------------------------------------------------------
// Graph binding
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct BoundConv {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
}

pub struct BoundResidual {
    pub conv1: BoundConv,
    pub conv2: BoundConv,
    pub shortcut: Option<BoundConv>,
}

pub enum BoundBackbone {
    Toy(Vec<BoundConv>),
    ResnetLike {
        stem: BoundConv,
        blocks: Vec<BoundResidual>,
    },
}

/// Leaf nodes of every parameter on one tape, plus the (name, var) list used
/// to collect gradients after the backward sweep.
pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub cam_projection: Var,
    pub embedding: Var,
    pub fuse: Var,
    pub w1: Var,
    pub w2: Var,
    pub classifier: Var,
    pub classifier_bias: Var,
    pub bindings: Vec<(String, Var)>,
}

impl ModelParams {
    pub fn bind(&self, t: &mut Tape) -> BoundModel {
        let mut bindings = Vec::new();
        fn leaf_in(
            t: &mut Tape,
            bindings: &mut Vec<(String, Var)>,
            name: &str,
            v: ArrayD<f64>,
        ) -> Var {
            let var = t.leaf(v);
            bindings.push((name.to_string(), var));
            var
        }
        let backbone = match &self.backbone {
            BackboneParams::Toy(layers) => BoundBackbone::Toy(
                layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| BoundConv {
                        w: leaf_in(t, &mut bindings, &format!("backbone.conv{i}.weight"), l.weight.clone()),
                        b: leaf_in(t, &mut bindings, &format!("backbone.conv{i}.bias"), l.bias.clone().into_dyn()),
                        stride: l.stride,
                    })
                    .collect(),
            ),
            BackboneParams::ResnetLike { stem, blocks } => {
                let bind_conv = |t: &mut Tape,
                                 bindings: &mut Vec<(String, Var)>,
                                 name: &str,
                                 l: &ConvLayer| {
                    let w = t.leaf(l.weight.clone());
                    bindings.push((format!("{name}.weight"), w));
                    let b = t.leaf(l.bias.clone().into_dyn());
                    bindings.push((format!("{name}.bias"), b));
                    BoundConv { w, b, stride: l.stride }
                };
                let stem_b = bind_conv(t, &mut bindings, "backbone.stem", stem);
                let blocks_b = blocks
                    .iter()
                    .enumerate()
                    .map(|(i, blk)| BoundResidual {
                        conv1: bind_conv(t, &mut bindings, &format!("backbone.block{i}.conv1"), &blk.conv1),
                        conv2: bind_conv(t, &mut bindings, &format!("backbone.block{i}.conv2"), &blk.conv2),
                        shortcut: blk
                            .shortcut
                            .as_ref()
                            .map(|sc| bind_conv(t, &mut bindings, &format!("backbone.block{i}.shortcut"), sc)),
                    })
                    .collect();
                BoundBackbone::ResnetLike { stem: stem_b, blocks: blocks_b }
            }
        };
        BoundModel {
            backbone,
            cam_projection: leaf_in(t, &mut bindings, "cam.projection", self.cam_projection.clone().into_dyn()),
            embedding: leaf_in(t, &mut bindings, "cam.embedding", self.embedding.clone().into_dyn()),
            fuse: leaf_in(t, &mut bindings, "mil.fuse", self.fuse.clone().into_dyn()),
            w1: leaf_in(t, &mut bindings, "mil.w1", self.w1.clone().into_dyn()),
            w2: leaf_in(t, &mut bindings, "mil.w2", self.w2.clone().into_dyn()),
            classifier: leaf_in(t, &mut bindings, "mil.classifier", self.classifier.clone().into_dyn()),
            classifier_bias: leaf_in(t, &mut bindings, "mil.classifier_bias", self.classifier_bias.clone().into_dyn()),
            bindings,
        }
    }
}

fn conv_relu(t: &mut Tape, x: Var, c: &BoundConv) -> Var {
    let y = t.conv2d(x, c.w, c.stride, 1);
    let y = t.bias_add_channel(y, c.b);
    t.relu(y)
}

fn finite_or(t: &Tape, v: Var, layer: &str) -> Result<()> {
    if t.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow { layer: layer.to_string() })
    }
}

/// Runs the backbone on an input image node: [Cin,H,W] -> [L, H/8, W/8].
pub fn forward_backbone_g(t: &mut Tape, bound: &BoundBackbone, x: Var) -> Result<Var> {
    match bound {
        BoundBackbone::Toy(layers) => {
            let mut v = x;
            for (i, layer) in layers.iter().enumerate() {
                v = conv_relu(t, v, layer);
                finite_or(t, v, &format!("toy_cnn.conv{i}"))?;
            }
            Ok(v)
        }
        BoundBackbone::ResnetLike { stem, blocks } => {
            let mut v = conv_relu(t, x, stem);
            finite_or(t, v, "resnet38_like.stem")?;
            for (i, block) in blocks.iter().enumerate() {
                let h = conv_relu(t, v, &block.conv1);
                let h = t.conv2d(h, block.conv2.w, block.conv2.stride, 1);
                let h = t.bias_add_channel(h, block.conv2.b);
                let sc = match &block.shortcut {
                    Some(s) => {
                        let y = t.conv2d(v, s.w, s.stride, 1);
                        t.bias_add_channel(y, s.b)
                    }
                    None => v,
                };
                let sum = t.add(h, sc);
                v = t.relu(sum);
                finite_or(t, v, &format!("resnet38_like.block{i}"))?;
            }
            Ok(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn toy_backbone_has_stride_8() {
        let params = ModelParams::init(BackboneKind::ToyCnn, 1, 16, HeadDims::defaults(16), 0);
        let mut t = Tape::new();
        let bound = params.bind(&mut t);
        let x = t.leaf(Array3::<f64>::zeros((1, 64, 64)).into_dyn());
        let f = forward_backbone_g(&mut t, &bound.backbone, x).unwrap();
        assert_eq!(t.value(f).shape(), &[16, 8, 8]);
    }

    #[test]
    fn resnet_like_matches_interface() {
        let params =
            ModelParams::init(BackboneKind::Resnet38Like, 1, 32, HeadDims::defaults(32), 0);
        let mut t = Tape::new();
        let bound = params.bind(&mut t);
        let x = t.leaf(Array3::<f64>::zeros((1, 32, 32)).into_dyn());
        let f = forward_backbone_g(&mut t, &bound.backbone, x).unwrap();
        assert_eq!(t.value(f).shape(), &[32, 4, 4]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::init(BackboneKind::ToyCnn, 1, 16, HeadDims::defaults(16), 7);
        let b = ModelParams::init(BackboneKind::ToyCnn, 1, 16, HeadDims::defaults(16), 7);
        assert_eq!(a.cam_projection, b.cam_projection);
        assert_eq!(a.fuse, b.fuse);
    }

    #[test]
    fn param_visitor_and_bindings_agree_on_names() {
        let mut params = ModelParams::init(BackboneKind::ToyCnn, 1, 16, HeadDims::defaults(16), 1);
        let mut visited = Vec::new();
        params.for_each_param_mut(|meta, _| visited.push(meta.name.clone()));
        let mut t = Tape::new();
        let bound = params.bind(&mut t);
        let bound_names: Vec<String> = bound.bindings.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(visited, bound_names);
    }
}
