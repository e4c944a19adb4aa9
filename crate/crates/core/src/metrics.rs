//! Classification and segmentation metrics.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Area under the ROC curve via the rank statistic (Mann-Whitney U),
/// with half credit for tied scores.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    // average ranks over tie groups
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN score"));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0; // 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Quadratic reference implementation: fraction of positive/negative pairs
/// ranked correctly, ties counted half.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("single-class sample".into()));
    }
    let mut total = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            total += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(total / (n_pos * n_neg) as f64)
}

/// Accuracy and F1 at a probability threshold (default 0.5).
/// F1 is 0 when precision + recall is 0.
pub fn accuracy_f1(probs: &[f64], labels: &[bool], threshold: f64) -> Result<(f64, f64)> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Dimension("probabilities/labels length mismatch".into()));
    }
    let (mut tp, mut fp, mut tn, mut fr) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fr += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / probs.len() as f64;
    let f1 = if 2 * tp + fp + fr == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fr) as f64
    };
    Ok((accuracy, f1))
}

/// Binarizes the lesion channel of a normalized activation map.
pub fn cam_to_segmentation(cam: &Array2<f64>, threshold: f64) -> Array2<u8> {
    cam.mapv(|v| u8::from(v >= threshold))
}

/// Rescales a nonnegative map so its max is 1 (a refined map is a weighted
/// average, so its peak shrinks below 1 and fixed thresholds need this).
pub fn renormalize(map: &Array2<f64>) -> Array2<f64> {
    let max = map.iter().cloned().fold(0.0f64, f64::max);
    map.mapv(|v| v.max(0.0) / (max + crate::cam::NORM_EPS))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScore {
    pub iou: f64,
    pub dice: f64,
}

/// IoU and Dice of binary masks; two empty masks score 1.0.
pub fn segmentation_score(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<SegmentationScore> {
    if pred.dim() != truth.dim() {
        return Err(Error::Dimension(format!(
            "mask dims {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (&a, &b) in pred.iter().zip(truth.iter()) {
        let a = a != 0;
        let b = b != 0;
        inter += usize::from(a && b);
        p += usize::from(a);
        t += usize::from(b);
    }
    let union = p + t - inter;
    Ok(SegmentationScore {
        iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        dice: if p + t == 0 { 1.0 } else { 2.0 * inter as f64 / (p + t) as f64 },
    })
}

/// Evaluation summary serialized by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_dice: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auroc_with_tie_matches_hand_value() {
        // positive tied with one negative: 1 pair correct, 1 pair half credit
        let scores = [0.8, 0.8, 0.3];
        let labels = [true, false, false];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.75);
    }

    #[test]
    fn auroc_perfect_and_inverted() {
        let labels = [true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
    }

    #[test]
    fn auroc_single_class_is_undefined() {
        assert!(matches!(
            auroc(&[0.1, 0.9], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn rank_auroc_equals_pairwise_on_random_data_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(2..200);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..20) as f64) / 19.0) // coarse grid forces ties
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1 % n] = false;
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_pairwise(&scores, &labels).unwrap();
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn accuracy_f1_example() {
        let probs = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, false, true, false];
        let (acc, f1) = accuracy_f1(&probs, &labels, 0.5).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!(f1, 0.5);
    }

    #[test]
    fn f1_zero_when_no_predictions_or_positives() {
        let (acc, f1) = accuracy_f1(&[0.1, 0.2], &[false, false], 0.5).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn segmentation_edge_cases() {
        let a = Array2::<u8>::zeros((4, 4));
        let s = segmentation_score(&a, &a).unwrap();
        assert_eq!(s.iou, 1.0);
        assert_eq!(s.dice, 1.0);

        let mut b = a.clone();
        b[[0, 0]] = 1;
        let s = segmentation_score(&a, &b).unwrap();
        assert_eq!(s.iou, 0.0);
        assert_eq!(s.dice, 0.0);

        let c = Array2::<u8>::zeros((4, 5));
        assert!(segmentation_score(&a, &c).is_err());
    }

    #[test]
    fn segmentation_half_overlap() {
        let mut pred = Array2::<u8>::zeros((2, 2));
        let mut truth = Array2::<u8>::zeros((2, 2));
        pred[[0, 0]] = 1;
        pred[[0, 1]] = 1;
        truth[[0, 1]] = 1;
        truth[[1, 0]] = 1;
        let s = segmentation_score(&pred, &truth).unwrap();
        assert!((s.iou - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.dice - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_transform(
            raw in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 4..60)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let mut labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            labels[0] = true;
            labels[1] = false;
            let base = auroc(&scores, &labels).unwrap();
            let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            let shifted = auroc(&squashed, &labels).unwrap();
            prop_assert!((base - shifted).abs() < 1e-12);
        }

        #[test]
        fn predicted_positives_shrink_with_threshold(
            probs in proptest::collection::vec(0.0f64..1.0, 2..40),
            t1 in 0.1f64..0.5,
            t2 in 0.5f64..0.9,
        ) {
            let labels: Vec<bool> = probs.iter().map(|&p| p > 0.5).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                return Ok(());
            }
            let low = probs.iter().filter(|&&p| p >= t1).count();
            let high = probs.iter().filter(|&&p| p >= t2).count();
            prop_assert!(high <= low);
        }
    }
}
