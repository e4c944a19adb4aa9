//! Feature-space multiple-instance learning with sigmoid attention pooling.
//!
//! The two Siamese feature maps are aligned, concatenated and projected to K
//! channels; each spatial cell of the fused map is one instance. Attention
//! gates the instances, a mean pool collapses them, and a linear classifier
//! with softmax emits the rDR probability.

use crate::affine::{apply_affine_to_dims_g, AffineSpec};
use crate::autodiff::{Tape, Var};
use crate::cam::FeatureMap;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3};

/// K-channel fused feature map whose spatial cells are the MIL instances.
#[derive(Debug, Clone)]
pub struct InstanceBag {
    pub fused: Array3<f64>,
    pub source_dims: (usize, usize),
    pub k: usize,
}

impl InstanceBag {
    pub fn n_instances(&self) -> usize {
        self.source_dims.0 * self.source_dims.1
    }
}

/// Per-instance attention in the open interval (0, 1).
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub weights: Array1<f64>,
}

/// Learnable parameters of the MIL head.
#[derive(Debug, Clone)]
pub struct MilParams {
    /// 1x1 fuse convolution [K, 2L].
    pub fuse: Array2<f64>,
    /// Attention projection vector [D].
    pub w1: Array1<f64>,
    /// Attention matrix [D, K].
    pub w2: Array2<f64>,
    /// Final classifier [2, K].
    pub classifier: Array2<f64>,
    /// Classifier bias [2].
    pub classifier_bias: Array1<f64>,
}

// ---------------------------------------------------------------------------
// Graph-level building blocks
// ---------------------------------------------------------------------------

/// Aligns the affine-branch features back onto the original grid, concatenates
/// both maps channelwise and projects to K channels: [2L,H,W] -> [K,H,W].
pub fn build_instance_bag_g(
    t: &mut Tape,
    f_orig: Var,
    f_af: Var,
    spec: &AffineSpec,
    fuse: Var,
) -> Result<Var> {
    let os = t.value(f_orig).shape().to_vec();
    let aligned = apply_affine_to_dims_g(t, f_af, &spec.inverse(), (os[1], os[2]))?;
    let both = t.concat_channels(f_orig, aligned);
    if t.value(fuse).shape()[1] != 2 * os[0] {
        return Err(Error::Dimension(format!(
            "fuse weights expect {} channels, concatenated features have {}",
            t.value(fuse).shape()[1],
            2 * os[0]
        )));
    }
    Ok(crate::cam::project_1x1_g(t, both, fuse))
}

/// Attention over instance columns: sigmoid(w1^T relu(w2 f)), [K,H,W] -> [HW].
pub fn attention_weights_g(t: &mut Tape, bag: Var, w1: Var, w2: Var) -> Var {
    let bs = t.value(bag).shape().to_vec();
    let (k, hw) = (bs[0], bs[1] * bs[2]);
    let flat = t.reshape(bag, &[k, hw]);
    let hidden = t.matmul(w2, flat);
    let hidden = t.relu(hidden);
    let d = t.value(w1).shape()[0];
    let w1_row = t.reshape(w1, &[1, d]);
    let logits = t.matmul(w1_row, hidden);
    let logits = t.reshape(logits, &[hw]);
    t.sigmoid(logits)
}

/// Gates every channel of the flattened bag by the per-instance weight.
pub fn apply_attention_g(t: &mut Tape, bag_flat: Var, attention: Var) -> Var {
    t.mul_cols(bag_flat, attention)
}

/// Mean-pools instances and applies the linear classifier with softmax.
pub fn mil_classify_g(t: &mut Tape, gated_flat: Var, classifier: Var, bias: Var) -> Var {
    let pooled = t.mean_axis(gated_flat, 1);
    let k = t.value(pooled).shape()[0];
    let col = t.reshape(pooled, &[k, 1]);
    let scores = t.matmul(classifier, col);
    let scores = t.reshape(scores, &[2]);
    let scores = t.add(scores, bias);
    t.softmax(scores)
}

// ---------------------------------------------------------------------------
// Pure API
// ---------------------------------------------------------------------------

pub fn build_instance_bag(
    f_orig: &FeatureMap,
    f_af: &FeatureMap,
    spec: &AffineSpec,
    params: &MilParams,
) -> Result<InstanceBag> {
    let mut t = Tape::new();
    let a = t.leaf(f_orig.data.clone().into_dyn());
    let b = t.leaf(f_af.data.clone().into_dyn());
    let w = t.leaf(params.fuse.clone().into_dyn());
    let bag = build_instance_bag_g(&mut t, a, b, spec, w)?;
    let fused = t
        .value(bag)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let (k, h, w) = fused.dim();
    Ok(InstanceBag {
        fused,
        source_dims: (h, w),
        k,
    })
}

pub fn attention_weights(bag: &InstanceBag, params: &MilParams) -> Result<AttentionWeights> {
    if params.w2.ncols() != bag.k || params.w2.nrows() != params.w1.len() {
        return Err(Error::Dimension(format!(
            "attention shapes inconsistent: w2 {}x{}, w1 {}, bag K={}",
            params.w2.nrows(),
            params.w2.ncols(),
            params.w1.len(),
            bag.k
        )));
    }
    let mut t = Tape::new();
    let b = t.leaf(bag.fused.clone().into_dyn());
    let w1 = t.leaf(params.w1.clone().into_dyn());
    let w2 = t.leaf(params.w2.clone().into_dyn());
    let a = attention_weights_g(&mut t, b, w1, w2);
    Ok(AttentionWeights {
        weights: t
            .value(a)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap(),
    })
}

pub fn apply_attention(bag: &InstanceBag, a: &AttentionWeights) -> Result<InstanceBag> {
    if a.weights.len() != bag.n_instances() {
        return Err(Error::Dimension(format!(
            "attention has {} weights, bag has {} instances",
            a.weights.len(),
            bag.n_instances()
        )));
    }
    let mut out = bag.fused.clone();
    let (_, h, w) = out.dim();
    for mut plane in out.outer_iter_mut() {
        for y in 0..h {
            for x in 0..w {
                plane[[y, x]] *= a.weights[y * w + x];
            }
        }
    }
    Ok(InstanceBag {
        fused: out,
        source_dims: bag.source_dims,
        k: bag.k,
    })
}

pub fn mil_classify(gated: &InstanceBag, params: &MilParams) -> Array1<f64> {
    let mut t = Tape::new();
    let (k, h, w) = gated.fused.dim();
    let b = t.leaf(gated.fused.clone().into_dyn());
    let flat = t.reshape(b, &[k, h * w]);
    let cw = t.leaf(params.classifier.clone().into_dyn());
    let cb = t.leaf(params.classifier_bias.clone().into_dyn());
    let probs = mil_classify_g(&mut t, flat, cw, cb);
    t.value(probs)
        .clone()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use ndarray::{Array3, ArrayD, IxDyn};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmap(data: Array3<f64>) -> FeatureMap {
        FeatureMap::new(data, 8)
    }

    fn params(fuse: Array2<f64>, w1: Array1<f64>, w2: Array2<f64>, k: usize) -> MilParams {
        MilParams {
            fuse,
            w1,
            w2,
            classifier: Array2::zeros((2, k)),
            classifier_bias: Array1::zeros(2),
        }
    }

    #[test]
    fn selector_fuse_recovers_original_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = fmap(Array3::from_shape_fn((3, 2, 2), |_| rng.gen_range(-1.0..1.0)));
        // fuse = [I | 0]: keep the original branch, drop the aligned one
        let mut fuse = Array2::zeros((3, 6));
        for i in 0..3 {
            fuse[[i, i]] = 1.0;
        }
        let p = params(fuse, Array1::zeros(1), Array2::zeros((1, 3)), 3);
        let bag = build_instance_bag(&f, &f, &AffineSpec::Identity, &p).unwrap();
        assert_eq!(bag.k, 3);
        for (a, b) in bag.fused.iter().zip(f.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_shape_contract() {
        let f = fmap(Array3::zeros((8, 16, 16)));
        let p = params(Array2::zeros((32, 16)), Array1::zeros(4), Array2::zeros((4, 32)), 32);
        let bag = build_instance_bag(&f, &f, &AffineSpec::Identity, &p).unwrap();
        assert_eq!(bag.fused.dim(), (32, 16, 16));
        assert_eq!(bag.n_instances(), 256);
    }

    #[test]
    fn rescale_bag_matches_resize_then_project_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = AffineSpec::Rescale { scale_factor: 0.4 };
        let f_orig = fmap(Array3::from_shape_fn((8, 20, 20), |_| rng.gen_range(-1.0..1.0)));
        let f_af = fmap(Array3::from_shape_fn((8, 8, 8), |_| rng.gen_range(-1.0..1.0)));
        let fuse = Array2::from_shape_fn((4, 16), |_| rng.gen_range(-0.5..0.5));
        let p = params(fuse.clone(), Array1::zeros(1), Array2::zeros((1, 4)), 4);
        let bag = build_instance_bag(&f_orig, &f_af, &spec, &p).unwrap();

        let aligned = crate::affine::apply_affine(
            &f_af.data,
            &AffineSpec::Rescale { scale_factor: 2.5 },
        )
        .unwrap();
        assert_eq!(aligned.dim(), (8, 20, 20));
        for y in 0..20 {
            for x in 0..20 {
                for k in 0..4 {
                    let mut dot = 0.0;
                    for l in 0..8 {
                        dot += fuse[[k, l]] * f_orig.data[[l, y, x]];
                        dot += fuse[[k, 8 + l]] * aligned[[l, y, x]];
                    }
                    assert!((bag.fused[[k, y, x]] - dot).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_w1_gives_uniform_half_attention() {
        let bag = InstanceBag {
            fused: Array3::from_elem((2, 2, 2), 1.5),
            source_dims: (2, 2),
            k: 2,
        };
        let p = params(Array2::zeros((2, 4)), Array1::zeros(3), Array2::ones((3, 2)), 2);
        let a = attention_weights(&bag, &p).unwrap();
        assert!(a.weights.iter().all(|&w| (w - 0.5).abs() < 1e-12));
    }

    #[test]
    fn relu_clamps_negative_instances() {
        let bag = InstanceBag {
            fused: Array3::from_elem((1, 1, 1), -5.0),
            source_dims: (1, 1),
            k: 1,
        };
        let p = params(Array2::zeros((1, 2)), Array1::ones(1), Array2::ones((1, 1)), 1);
        let a = attention_weights(&bag, &p).unwrap();
        assert!((a.weights[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn positive_instance_raises_attention() {
        let bag = InstanceBag {
            fused: Array3::from_elem((1, 1, 1), 2.0),
            source_dims: (1, 1),
            k: 1,
        };
        let p = params(Array2::zeros((1, 2)), Array1::ones(1), Array2::ones((1, 1)), 1);
        let a = attention_weights(&bag, &p).unwrap();
        assert!((a.weights[0] - 0.8807970779778823).abs() < 1e-6);
    }

    #[test]
    fn attention_scales_all_channels() {
        let bag = InstanceBag {
            fused: Array3::from_elem((1, 1, 1), 8.0),
            source_dims: (1, 1),
            k: 1,
        };
        let a = AttentionWeights { weights: Array1::from_elem(1, 0.25) };
        let gated = apply_attention(&bag, &a).unwrap();
        assert!((gated.fused[[0, 0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn apply_attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let bag = InstanceBag {
            fused: Array3::from_shape_fn((3, 2, 2), |_| rng.gen_range(-1.0..1.0)),
            source_dims: (2, 2),
            k: 3,
        };
        let a = AttentionWeights {
            weights: Array1::from_shape_fn(4, |_| rng.gen_range(0.01..0.99)),
        };
        let gated = apply_attention(&bag, &a).unwrap();
        for k in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    let expect = bag.fused[[k, y, x]] * a.weights[y * 2 + x];
                    assert!((gated.fused[[k, y, x]] - expect).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn attention_length_mismatch_is_rejected() {
        let bag = InstanceBag {
            fused: Array3::zeros((1, 2, 2)),
            source_dims: (2, 2),
            k: 1,
        };
        let a = AttentionWeights { weights: Array1::zeros(3) };
        assert!(apply_attention(&bag, &a).is_err());
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let bag = InstanceBag {
            fused: Array3::from_elem((2, 2, 2), 0.7),
            source_dims: (2, 2),
            k: 2,
        };
        let p = params(Array2::zeros((2, 4)), Array1::zeros(1), Array2::zeros((1, 2)), 2);
        let probs = mil_classify(&bag, &p);
        assert!((probs[0] - 0.5).abs() < 1e-12 && (probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn saturated_bias_dominates() {
        let bag = InstanceBag {
            fused: Array3::zeros((2, 1, 1)),
            source_dims: (1, 1),
            k: 2,
        };
        let mut p = params(Array2::zeros((2, 4)), Array1::zeros(1), Array2::zeros((1, 2)), 2);
        p.classifier_bias = ndarray::array![10.0, -10.0];
        let probs = mil_classify(&bag, &p);
        assert!((probs[0] - 1.0).abs() < 1e-8);
        assert!((probs[1] - 2.06e-9).abs() < 1e-10);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let bag = InstanceBag {
            fused: Array3::from_shape_fn((3, 2, 2), |_| rng.gen_range(-2.0..2.0)),
            source_dims: (2, 2),
            k: 3,
        };
        let p = MilParams {
            fuse: Array2::zeros((3, 6)),
            w1: Array1::zeros(2),
            w2: Array2::zeros((2, 3)),
            classifier: Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)),
            classifier_bias: Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0)),
        };
        let probs = mil_classify(&bag, &p);
        assert!((probs.sum() - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn mil_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let bag = ArrayD::from_shape_fn(IxDyn(&[3, 2, 2]), |_| rng.gen_range(0.3..1.0));
        let w1 = ArrayD::from_shape_fn(IxDyn(&[2]), |_| rng.gen_range(0.3..0.8));
        let w2 = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |_| rng.gen_range(0.3..0.8));
        let cw = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |_| rng.gen_range(-0.5..0.5));
        let cb = ArrayD::from_shape_fn(IxDyn(&[2]), |_| rng.gen_range(-0.2..0.2));
        let report = check_gradients(
            "mil",
            &[bag, w1, w2, cw, cb],
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
            |t, v| {
                let a = attention_weights_g(t, v[0], v[1], v[2]);
                let flat = t.reshape(v[0], &[3, 4]);
                let gated = apply_attention_g(t, flat, a);
                let probs = mil_classify_g(t, gated, v[3], v[4]);
                let p1 = t.index(probs, 1);
                let p1 = t.clamp_min(p1, 1e-12);
                let l = t.ln(p1);
                t.neg(l)
            },
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    proptest! {
        #[test]
        fn attention_is_bounded_and_permutation_equivariant(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bag = InstanceBag {
                fused: Array3::from_shape_fn((2, 1, 4), |_| rng.gen_range(-3.0..3.0)),
                source_dims: (1, 4),
                k: 2,
            };
            let p = params(
                Array2::zeros((2, 4)),
                Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0)),
                Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0)),
                2,
            );
            let a = attention_weights(&bag, &p).unwrap();
            prop_assert!(a.weights.iter().all(|&w| w > 0.0 && w < 1.0));

            // reverse the instance order
            let mut rev = bag.fused.clone();
            for k in 0..2 {
                for x in 0..4 {
                    rev[[k, 0, x]] = bag.fused[[k, 0, 3 - x]];
                }
            }
            let bag_rev = InstanceBag { fused: rev, source_dims: (1, 4), k: 2 };
            let a_rev = attention_weights(&bag_rev, &p).unwrap();
            for x in 0..4 {
                prop_assert!((a_rev.weights[x] - a.weights[3 - x]).abs() < 1e-12);
            }

            // mean-pooled classification is permutation invariant
            let mut cp = p.clone();
            cp.classifier = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
            let g1 = apply_attention(&bag, &a).unwrap();
            let g2 = apply_attention(&bag_rev, &a_rev).unwrap();
            let p1 = mil_classify(&g1, &cp);
            let p2 = mil_classify(&g2, &cp);
            prop_assert!((p1[0] - p2[0]).abs() < 1e-12);
        }

        #[test]
        fn attention_is_monotone_in_activation(v1 in -4.0f64..4.0, v2 in -4.0f64..4.0) {
            let mk = |v: f64| InstanceBag {
                fused: Array3::from_elem((1, 1, 1), v),
                source_dims: (1, 1),
                k: 1,
            };
            let p = params(Array2::zeros((1, 2)), Array1::ones(1), Array2::ones((1, 1)), 1);
            let a1 = attention_weights(&mk(v1), &p).unwrap().weights[0];
            let a2 = attention_weights(&mk(v2), &p).unwrap().weights[0];
            if v1 <= v2 {
                prop_assert!(a1 <= a2 + 1e-15);
            } else {
                prop_assert!(a2 <= a1 + 1e-15);
            }
        }
    }
}
