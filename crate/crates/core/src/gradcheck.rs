//! Central finite-difference checking of analytic gradients.
//!
//! A check rebuilds the forward graph from perturbed copies of the inputs, so
//! the numeric estimate never reuses the analytic path's intermediate state.

use crate::autodiff::{Tape, Var};
use ndarray::ArrayD;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Default maximum relative error accepted by [`check_gradients`].
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub n_elements: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks d(loss)/d(inputs[i]) for every element of every input against central
/// finite differences. `build` must construct the scalar loss from leaf vars in
/// input order on a fresh tape each call.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[ArrayD<f64>],
    step: f64,
    tolerance: f64,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |inputs: &[ArrayD<f64>]| -> (f64, Vec<Option<ArrayD<f64>>>, Vec<Var>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        (value, grads, vars)
    };

    let (_, grads, vars) = run(inputs);

    let mut max_rel = 0.0f64;
    let mut n = 0usize;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads[vars[i].id()]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        let analytic = analytic.as_standard_layout().to_owned();
        debug_assert_eq!(analytic.shape(), input.shape(), "gradient shape mismatch on input {i}");
        for idx in 0..input.len() {
            let orig = work[i].as_slice().unwrap()[idx];

            work[i].as_slice_mut().unwrap()[idx] = orig + step;
            let (f_plus, _, _) = run(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig - step;
            let (f_minus, _, _) = run(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic.as_slice().unwrap()[idx];
            max_rel = max_rel.max(rel_error(a, numeric));
            n += 1;
        }
    }

    GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        tolerance,
        n_elements: n,
    }
}

/// The standard verification suite over every differentiable building block:
/// convolution, resizing, the CAM/affinity/refinement pipeline, the
/// attention-MIL head, the equivariance losses and the training objectives.
///
/// Inputs are seeded and sampled away from ReLU/L1 kinks so the central
/// difference stays valid at the default step.
pub fn standard_suite() -> Vec<GradCheckReport> {
    use crate::affine::AffineSpec;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut sample = |shape: &[usize], lo: f64, hi: f64| -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
    };

    let mut reports = Vec::new();

    let input = sample(&[2, 6, 6], 0.1, 1.0);
    let weight = sample(&[3, 2, 3, 3], -0.5, 0.5);
    reports.push(check_gradients(
        "conv2d_stride2",
        &[input, weight],
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
        |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1);
            let sq = t.square(y);
            t.mean_all(sq)
        },
    ));

    let x = sample(&[2, 5, 7], 0.1, 1.0);
    reports.push(check_gradients(
        "resize_bilinear",
        &[x],
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
        |t, v| {
            let y = t.resize_bilinear(v[0], 3, 4);
            let sq = t.square(y);
            t.mean_all(sq)
        },
    ));

    // positive features keep the ReLUs inside normalization strictly active
    let feats = sample(&[4, 3, 3], 0.2, 1.0);
    let proj = sample(&[2, 4], 0.1, 0.6);
    let emb = sample(&[3, 4], -0.6, 0.6);
    reports.push(check_gradients(
        "cam_refinement_pipeline",
        &[feats, proj, emb],
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
        |t, v| {
            let raw = crate::cam::project_1x1_g(t, v[0], v[1]);
            let cam = crate::cam::normalize_cam_g(t, raw);
            let e = crate::cam::project_1x1_g(t, v[0], v[2]);
            let corr = crate::cam::pixel_correlation_g(t, e);
            let refined = crate::cam::refine_cam_g(t, cam, corr);
            let sq = t.square(refined);
            t.mean_all(sq)
        },
    ));

    let bag = sample(&[5, 2, 2], 0.2, 1.0);
    let w1 = sample(&[3], 0.1, 0.8);
    let w2 = sample(&[3, 5], 0.1, 0.8);
    let cls = sample(&[2, 5], -0.5, 0.5);
    let bias = sample(&[2], -0.2, 0.2);
    reports.push(check_gradients(
        "attention_mil_head",
        &[bag, w1, w2, cls, bias],
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
        |t, v| {
            let att = crate::mil::attention_weights_g(t, v[0], v[1], v[2]);
            let flat = t.reshape(v[0], &[5, 4]);
            let gated = crate::mil::apply_attention_g(t, flat, att);
            let probs = crate::mil::mil_classify_g(t, gated, v[3], v[4]);
            crate::objective::cross_entropy_g(t, probs, true)
        },
    ));

    // branch maps separated by a margin so no |.| sits near its kink
    let cam_orig = sample(&[2, 4, 4], 0.55, 0.95);
    let cam_af = sample(&[2, 2, 2], 0.05, 0.35);
    let cam_rm_orig = sample(&[2, 4, 4], 0.55, 0.95);
    let cam_rm_af = sample(&[2, 2, 2], 0.05, 0.35);
    let spec = AffineSpec::Rescale { scale_factor: 0.5 };
    reports.push(check_gradients(
        "equivariance_losses",
        &[cam_orig, cam_rm_orig, cam_af, cam_rm_af],
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
        move |t, v| {
            let er = crate::affine::er_loss_g(t, v[0], v[2], &spec).unwrap();
            let ecr = crate::affine::ecr_loss_g(t, v[0], v[1], v[2], v[3], &spec).unwrap();
            t.add(er, ecr)
        },
    ));

    let logits = sample(&[2], -1.5, 1.5);
    reports.push(check_gradients(
        "classification_objectives",
        &[logits],
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
        |t, v| {
            let labels = crate::objective::encode_labels(true);
            let msm = crate::objective::multilabel_soft_margin_g(t, v[0], &labels, true);
            let probs = t.softmax(v[0]);
            let ce = crate::objective::cross_entropy_g(t, probs, true);
            t.add(msm, ce)
        },
    ));

    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn standard_suite_passes() {
        for report in standard_suite() {
            assert!(
                report.passed(),
                "{}: max rel err {} over {} elements",
                report.name,
                report.max_rel_error,
                report.n_elements
            );
        }
    }

    #[test]
    fn quadratic_passes() {
        let x = array![1.5, -2.0, 0.7].into_dyn();
        let report = check_gradients("quadratic", &[x], DEFAULT_STEP, DEFAULT_TOLERANCE, |t, v| {
            let sq = t.square(v[0]);
            t.sum_all(sq)
        });
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn sigmoid_softplus_chain_passes() {
        let x = array![[0.3, -1.2], [2.1, 0.9]].into_dyn();
        let report = check_gradients("sig-softplus", &[x], DEFAULT_STEP, DEFAULT_TOLERANCE, |t, v| {
            let s = t.sigmoid(v[0]);
            let p = t.softplus(s);
            t.mean_all(p)
        });
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn broken_gradient_is_caught() {
        // abs within one step of its kink: analytic slope 1, numeric estimate 0.2
        let x = array![2e-4].into_dyn();
        let report = check_gradients("abs-at-kink", &[x], DEFAULT_STEP, DEFAULT_TOLERANCE, |t, v| {
            let a = t.abs(v[0]);
            t.sum_all(a)
        });
        assert!(!report.passed());
    }
}
