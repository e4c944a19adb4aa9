//! Label encoding and the four loss terms of the composite objective.

use crate::autodiff::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Probability clamp for the MIL cross-entropy.
pub const PROB_EPS: f64 = 1e-12;

/// Foreground/background multi-label encoding of an image-level rDR label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLabel {
    /// Always 1: every image contains background.
    pub background: u8,
    /// 1 iff the image is referable DR.
    pub lesion: u8,
}

/// Encodes an image-level label: rDR -> (1,1); non-rDR -> (1,0).
pub fn encode_labels(is_rdr: bool) -> MultiLabel {
    MultiLabel {
        background: 1,
        lesion: u8::from(is_rdr),
    }
}

impl MultiLabel {
    pub fn decode(&self) -> bool {
        self.lesion == 1
    }
}

/// Per-term loss values of one training step.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub multi_class: f64,
    pub er: f64,
    pub ecr: f64,
    pub cross_entropy: f64,
    pub total: f64,
}

/// Weights of the four loss terms, in the order
/// (multi_class, er, ecr, cross_entropy).
pub type LossWeights = [f64; 4];

/// MIL classification loss: -log p_label with the probability clamped to
/// [PROB_EPS, 1].
pub fn cross_entropy_g(t: &mut Tape, probs: Var, label: bool) -> Var {
    let p = t.index(probs, usize::from(label));
    let p = t.clamp_min(p, PROB_EPS);
    let l = t.ln(p);
    t.neg(l)
}

pub fn cross_entropy(probs: &[f64; 2], label: bool) -> f64 {
    let mut t = Tape::new();
    let p = t.leaf(ndarray::arr1(probs).into_dyn());
    let l = cross_entropy_g(&mut t, p, label);
    t.scalar(l)
}

/// Multi-label soft margin on CAM logits, mean over the selected classes.
///
/// Per class: y softplus(-z) + (1-y) softplus(z), the numerically stable form
/// of -[y log sigma(z) + (1-y) log(1-sigma(z))]. With `include_background`
/// false only the lesion channel (index 1) is supervised.
pub fn multilabel_soft_margin_g(
    t: &mut Tape,
    logits: Var,
    labels: &MultiLabel,
    include_background: bool,
) -> Var {
    let classes: &[(usize, u8)] = if include_background {
        &[(0, labels.background), (1, labels.lesion)]
    } else {
        &[(1, labels.lesion)]
    };
    let mut acc: Option<Var> = None;
    for &(c, y) in classes {
        let z = t.index(logits, c);
        let term = if y == 1 {
            let nz = t.neg(z);
            t.softplus(nz)
        } else {
            t.softplus(z)
        };
        acc = Some(match acc {
            Some(a) => t.add(a, term),
            None => term,
        });
    }
    let sum = acc.expect("at least one supervised class");
    t.scale(sum, 1.0 / classes.len() as f64)
}

pub fn multilabel_soft_margin(logits: &[f64], labels: &MultiLabel, include_background: bool) -> f64 {
    let mut t = Tape::new();
    let z = t.leaf(ndarray::arr1(logits).into_dyn());
    let l = multilabel_soft_margin_g(&mut t, z, labels, include_background);
    t.scalar(l)
}

/// Weighted sum of the four loss parts; fills `total`.
pub fn total_loss(parts: &mut LossBreakdown, weights: &LossWeights) {
    parts.total = weights[0] * parts.multi_class
        + weights[1] * parts.er
        + weights[2] * parts.ecr
        + weights[3] * parts.cross_entropy;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use ndarray::IxDyn;
    use proptest::prelude::*;

    #[test]
    fn label_encoding_round_trips() {
        assert_eq!(encode_labels(true), MultiLabel { background: 1, lesion: 1 });
        assert_eq!(encode_labels(false), MultiLabel { background: 1, lesion: 0 });
        for v in [true, false] {
            assert_eq!(encode_labels(v).decode(), v);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[1.0, 0.0], false) < 1e-10);
        assert!((cross_entropy(&[0.5, 0.5], true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cross_entropy(&[0.25, 0.75], false) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let l = cross_entropy(&[0.0, 1.0], false);
        assert!(l.is_finite());
        assert!((l - (-PROB_EPS.ln())).abs() < 1e-6);
    }

    #[test]
    fn soft_margin_examples() {
        let pos = encode_labels(true);
        let neg = encode_labels(false);
        assert!((multilabel_soft_margin(&[0.0, 0.0], &pos, false) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(multilabel_soft_margin(&[0.0, 50.0], &pos, false) < 1e-12);
        let expect = (1.0 + 2.0f64.exp()).ln();
        assert!((multilabel_soft_margin(&[0.0, 2.0], &neg, false) - expect).abs() < 1e-12);
    }

    #[test]
    fn soft_margin_with_background_averages_both_classes() {
        let pos = encode_labels(true);
        // both channels at logit 0 with labels (1,1): mean of two ln2 terms
        let l = multilabel_soft_margin(&[0.0, 0.0], &pos, true);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let mut parts = LossBreakdown { multi_class: 0.0, er: 0.0, ecr: 0.0, cross_entropy: 0.0, total: 0.0 };
        total_loss(&mut parts, &[1.0; 4]);
        assert_eq!(parts.total, 0.0);

        let mut parts = LossBreakdown { multi_class: 1.0, er: 2.0, ecr: 3.0, cross_entropy: 4.0, total: 0.0 };
        total_loss(&mut parts, &[1.0; 4]);
        assert_eq!(parts.total, 10.0);
        total_loss(&mut parts, &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(parts.total, 4.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let logits = ndarray::arr1(&[1.3, -0.7]).into_dyn();
        let pos = encode_labels(true);
        let report = check_gradients("soft-margin", &[logits], DEFAULT_STEP, DEFAULT_TOLERANCE, |t, v| {
            multilabel_soft_margin_g(t, v[0], &pos, true)
        });
        assert!(report.passed(), "max rel err {}", report.max_rel_error);

        // check the cross-entropy through a softmax so probabilities stay valid
        let scores = ndarray::ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.4, -1.1]).unwrap();
        let report = check_gradients("cross-entropy", &[scores], DEFAULT_STEP, DEFAULT_TOLERANCE, |t, v| {
            let probs = t.softmax(v[0]);
            cross_entropy_g(t, probs, true)
        });
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    proptest! {
        #[test]
        fn soft_margin_is_monotone_in_logit(z1 in -5.0f64..5.0, z2 in -5.0f64..5.0) {
            let (lo, hi) = if z1 < z2 { (z1, z2) } else { (z2, z1) };
            prop_assume!(hi - lo > 1e-9);
            let pos = encode_labels(true);
            let neg = encode_labels(false);
            // label 1: strictly decreasing in the logit
            prop_assert!(
                multilabel_soft_margin(&[0.0, lo], &pos, false)
                    > multilabel_soft_margin(&[0.0, hi], &pos, false)
            );
            // label 0: strictly increasing
            prop_assert!(
                multilabel_soft_margin(&[0.0, lo], &neg, false)
                    < multilabel_soft_margin(&[0.0, hi], &neg, false)
            );
        }

        #[test]
        fn total_loss_is_linear_in_each_part(a in -3.0f64..3.0, b in -3.0f64..3.0, w in 0.0f64..2.0) {
            let mk = |v: f64| {
                let mut parts = LossBreakdown { multi_class: v, er: 0.5, ecr: 0.25, cross_entropy: 0.1, total: 0.0 };
                total_loss(&mut parts, &[w, 1.0, 1.0, 1.0]);
                parts.total
            };
            prop_assert!((mk(a + b) + mk(0.0) - mk(a) - mk(b)).abs() < 1e-9);
        }

        #[test]
        fn cross_entropy_nonnegative(p in 1e-6f64..1.0) {
            let probs = [1.0 - p, p];
            prop_assert!(cross_entropy(&probs, true) >= 0.0);
            prop_assert!(cross_entropy(&probs, false) >= 0.0);
        }
    }
}
