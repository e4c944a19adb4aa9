//! Invertible affine transforms and the ER / ECR consistency losses.
//!
//! Both losses are mean-reduced L1 distances so their magnitude does not
//! depend on map resolution. The original-branch map is always brought to the
//! affine branch's actual spatial dims before comparison; when rescale
//! rounding disagrees by one cell the resize absorbs the difference.

use crate::autodiff::{Tape, Var};
use crate::cam::ActivationMap;
use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Parameterized invertible spatial transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AffineSpec {
    Identity,
    Rescale { scale_factor: f64 },
    HFlip,
    VFlip,
    /// Counter-clockwise rotation; angle must be a multiple of 90 degrees.
    Rotation { angle: i32 },
}

impl AffineSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            AffineSpec::Rescale { scale_factor } => {
                if !(*scale_factor > 0.0 && scale_factor.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "rescale factor must be positive and finite, got {scale_factor}"
                    )));
                }
            }
            AffineSpec::Rotation { angle } => {
                if angle.rem_euclid(90) != 0 {
                    return Err(Error::InvalidSpec(format!(
                        "rotation angle must be a multiple of 90, got {angle}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn inverse(&self) -> AffineSpec {
        match *self {
            AffineSpec::Identity => AffineSpec::Identity,
            AffineSpec::Rescale { scale_factor } => AffineSpec::Rescale {
                scale_factor: 1.0 / scale_factor,
            },
            AffineSpec::HFlip => AffineSpec::HFlip,
            AffineSpec::VFlip => AffineSpec::VFlip,
            AffineSpec::Rotation { angle } => AffineSpec::Rotation { angle: -angle },
        }
    }

    /// Output spatial dims for an input of the given dims.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let dims = match *self {
            AffineSpec::Identity | AffineSpec::HFlip | AffineSpec::VFlip => (h, w),
            AffineSpec::Rescale { scale_factor } => {
                let oh = (h as f64 * scale_factor).round() as usize;
                let ow = (w as f64 * scale_factor).round() as usize;
                (oh, ow)
            }
            AffineSpec::Rotation { angle } => {
                if quarter_turns(angle) % 2 == 1 {
                    (w, h)
                } else {
                    (h, w)
                }
            }
        };
        if dims.0 < 1 || dims.1 < 1 {
            return Err(Error::InvalidSpec(format!(
                "transform of {h}x{w} collapses to {}x{}",
                dims.0, dims.1
            )));
        }
        Ok(dims)
    }
}

fn quarter_turns(angle: i32) -> u8 {
    (angle.rem_euclid(360) / 90) as u8
}

/// Applies the transform on a tape node of shape [C,H,W].
pub fn apply_affine_g(t: &mut Tape, x: Var, spec: &AffineSpec) -> Result<Var> {
    let s = t.value(x).shape().to_vec();
    let (oh, ow) = spec.output_dims(s[1], s[2])?;
    Ok(match spec {
        AffineSpec::Identity => t.scale(x, 1.0),
        AffineSpec::Rescale { .. } => t.resize_bilinear(x, oh, ow),
        AffineSpec::HFlip => t.flip_h(x),
        AffineSpec::VFlip => t.flip_v(x),
        AffineSpec::Rotation { angle } => t.rot90(x, quarter_turns(*angle)),
    })
}

/// Like [`apply_affine_g`] but, for rescale, resizes directly to the given
/// target dims. Downsampling convolutions round dimensions up per stage, so
/// on stride-reduced maps the nominal rescaled dims may drift from the other
/// branch's actual dims by up to `ceil(max(s, 1/s))` cells per axis; anything
/// past that is treated as a real shape bug.
pub fn apply_affine_to_dims_g(
    t: &mut Tape,
    x: Var,
    spec: &AffineSpec,
    target: (usize, usize),
) -> Result<Var> {
    let s = t.value(x).shape().to_vec();
    let (nh, nw) = spec.output_dims(s[1], s[2])?;
    let slack = match spec {
        AffineSpec::Rescale { scale_factor } => {
            scale_factor.max(1.0 / scale_factor).ceil() as usize
        }
        _ => 1,
    };
    if nh.abs_diff(target.0) > slack || nw.abs_diff(target.1) > slack {
        return Err(Error::Dimension(format!(
            "transform yields {nh}x{nw}, target {}x{} is more than {slack} cells away",
            target.0, target.1
        )));
    }
    match spec {
        AffineSpec::Rescale { .. } => Ok(t.resize_bilinear(x, target.0, target.1)),
        _ => {
            if (nh, nw) != target {
                return Err(Error::Dimension(format!(
                    "transform yields {nh}x{nw}, expected {}x{}",
                    target.0, target.1
                )));
            }
            apply_affine_g(t, x, spec)
        }
    }
}

/// Pure transform of a [C,H,W] array (image, feature map, or CAM channels).
pub fn apply_affine(x: &Array3<f64>, spec: &AffineSpec) -> Result<Array3<f64>> {
    let mut t = Tape::new();
    let v = t.leaf(x.clone().into_dyn());
    let out = apply_affine_g(&mut t, v, spec)?;
    Ok(t.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap())
}

fn l1_to_target_g(
    t: &mut Tape,
    orig: Var,
    other: Var,
    spec: &AffineSpec,
) -> Result<Var> {
    let os = t.value(other).shape().to_vec();
    if t.value(orig).shape()[0] != os[0] {
        return Err(Error::Dimension("class channel counts differ".into()));
    }
    let transformed = apply_affine_to_dims_g(t, orig, spec, (os[1], os[2]))?;
    Ok(t.l1_mean(transformed, other))
}

/// ER loss (graph form): mean |AF(cam_orig) - cam_af|.
pub fn er_loss_g(t: &mut Tape, cam_orig: Var, cam_af: Var, spec: &AffineSpec) -> Result<Var> {
    l1_to_target_g(t, cam_orig, cam_af, spec)
}

/// ECR loss (graph form): L1(AF(cam_orig), cam_rm_af) + L1(AF(cam_rm_orig), cam_af).
pub fn ecr_loss_g(
    t: &mut Tape,
    cam_orig: Var,
    cam_rm_orig: Var,
    cam_af: Var,
    cam_rm_af: Var,
    spec: &AffineSpec,
) -> Result<Var> {
    let a = l1_to_target_g(t, cam_orig, cam_rm_af, spec)?;
    let b = l1_to_target_g(t, cam_rm_orig, cam_af, spec)?;
    Ok(t.add(a, b))
}

/// Equivariant regularization between the two Siamese branches.
pub fn er_loss(cam_orig: &ActivationMap, cam_af: &ActivationMap, spec: &AffineSpec) -> Result<f64> {
    let mut t = Tape::new();
    let a = t.leaf(cam_orig.data.clone().into_dyn());
    let b = t.leaf(cam_af.data.clone().into_dyn());
    let l = er_loss_g(&mut t, a, b, spec)?;
    Ok(t.scalar(l))
}

/// Equivariant cross regularization pairing raw CAMs with the other branch's refined CAMs.
pub fn ecr_loss(
    cam_orig: &ActivationMap,
    cam_rm_orig: &ActivationMap,
    cam_af: &ActivationMap,
    cam_rm_af: &ActivationMap,
    spec: &AffineSpec,
) -> Result<f64> {
    let mut t = Tape::new();
    let a = t.leaf(cam_orig.data.clone().into_dyn());
    let ra = t.leaf(cam_rm_orig.data.clone().into_dyn());
    let b = t.leaf(cam_af.data.clone().into_dyn());
    let rb = t.leaf(cam_rm_af.data.clone().into_dyn());
    let l = ecr_loss_g(&mut t, a, ra, b, rb, spec)?;
    Ok(t.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cam::CamKind;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use ndarray::{array, Array3, ArrayD};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm_cam(data: Array3<f64>) -> ActivationMap {
        ActivationMap { data, kind: CamKind::Original, normalized: true }
    }

    #[test]
    fn identity_returns_equal_copy() {
        let x = array![[[1.0, 2.0], [3.0, 4.0]]];
        let y = apply_affine(&x, &AffineSpec::Identity).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn hflip_reverses_columns() {
        let x = array![[[1.0, 2.0], [3.0, 4.0]]];
        let y = apply_affine(&x, &AffineSpec::HFlip).unwrap();
        assert_eq!(y, array![[[2.0, 1.0], [4.0, 3.0]]]);
    }

    #[test]
    fn rescale_04_of_512_gives_205() {
        let spec = AffineSpec::Rescale { scale_factor: 0.4 };
        assert_eq!(spec.output_dims(512, 512).unwrap(), (205, 205));
        let x = Array3::from_elem((1, 512, 512), 1.0);
        let y = apply_affine(&x, &spec).unwrap();
        assert_eq!(y.dim(), (1, 205, 205));
        // constant input stays constant under bilinear interpolation
        assert!(y.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn collapsing_rescale_is_invalid() {
        let spec = AffineSpec::Rescale { scale_factor: 0.1 };
        assert!(matches!(
            spec.output_dims(2, 2),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn flip_involutions_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((2, 3, 4), |_| rng.gen_range(-1.0..1.0));
        for spec in [AffineSpec::HFlip, AffineSpec::VFlip] {
            let y = apply_affine(&apply_affine(&x, &spec).unwrap(), &spec).unwrap();
            assert_eq!(x, y);
        }
        let mut r = x.clone();
        for _ in 0..4 {
            r = apply_affine(&r, &AffineSpec::Rotation { angle: 90 }).unwrap();
        }
        assert_eq!(r, x);
    }

    #[test]
    fn rescale_round_trip_dims() {
        for s in [0.4, 0.5, 2.0] {
            let spec = AffineSpec::Rescale { scale_factor: s };
            let (h1, w1) = spec.output_dims(40, 40).unwrap();
            let (h2, w2) = spec.inverse().output_dims(h1, w1).unwrap();
            assert_eq!((h2, w2), (40, 40));
        }
    }

    #[test]
    fn er_loss_zero_for_identical_maps() {
        let a = norm_cam(array![[[0.3, 0.8], [0.1, 0.5]]]);
        let l = er_loss(&a, &a, &AffineSpec::Identity).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn er_loss_single_element() {
        let a = norm_cam(Array3::from_elem((1, 1, 1), 0.8));
        let b = norm_cam(Array3::from_elem((1, 1, 1), 0.3));
        let l = er_loss(&a, &b, &AffineSpec::Identity).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
    }

    #[test]
    fn er_loss_matches_elementwise_oracle_under_hflip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(0.0..1.0));
        let b = Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(0.0..1.0));
        let l = er_loss(&norm_cam(a.clone()), &norm_cam(b.clone()), &AffineSpec::HFlip).unwrap();
        let flipped = apply_affine(&a, &AffineSpec::HFlip).unwrap();
        let mut acc = 0.0;
        for (x, y) in flipped.iter().zip(b.iter()) {
            acc += (x - y).abs();
        }
        assert!((l - acc / 8.0).abs() < 1e-7);
    }

    #[test]
    fn ecr_zero_when_everything_matches() {
        let a = norm_cam(array![[[0.2, 0.9], [0.4, 0.1]]]);
        let l = ecr_loss(&a, &a, &a, &a, &AffineSpec::Identity).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn ecr_constant_offset_term() {
        let a = norm_cam(Array3::from_elem((1, 2, 2), 0.4));
        let shifted = norm_cam(Array3::from_elem((1, 2, 2), 0.5));
        // first term |AF(a) - rm_af| = 0.1, second term |AF(rm) - af| = 0
        let l = ecr_loss(&a, &a, &a, &shifted, &AffineSpec::Identity).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ecr_matches_two_term_oracle_under_vflip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mk = |rng: &mut ChaCha8Rng| Array3::from_shape_fn((2, 2, 3), |_| rng.gen_range(0.0..1.0));
        let (a, ra, b, rb) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let l = ecr_loss(
            &norm_cam(a.clone()),
            &norm_cam(ra.clone()),
            &norm_cam(b.clone()),
            &norm_cam(rb.clone()),
            &AffineSpec::VFlip,
        )
        .unwrap();
        let fa = apply_affine(&a, &AffineSpec::VFlip).unwrap();
        let fra = apply_affine(&ra, &AffineSpec::VFlip).unwrap();
        let n = 12.0;
        let t1: f64 = fa.iter().zip(rb.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        let t2: f64 = fra.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        assert!((l - (t1 + t2)).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = norm_cam(Array3::zeros((1, 4, 4)));
        let b = norm_cam(Array3::zeros((1, 2, 2)));
        assert!(er_loss(&a, &b, &AffineSpec::Identity).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // keep map values apart so |x| kinks stay away from the sample points
        let mut mk = || {
            ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 3, 3]), |_| {
                let v: f64 = rng.gen_range(0.1..0.9);
                v
            })
        };
        let inputs = vec![mk(), mk(), mk(), mk()];
        let spec = AffineSpec::HFlip;
        let report = check_gradients("ecr", &inputs, DEFAULT_STEP, DEFAULT_TOLERANCE, |t, v| {
            ecr_loss_g(t, v[0], v[1], v[2], v[3], &spec).unwrap()
        });
        assert!(report.passed(), "max rel err {}", report.max_rel_error);

        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 4, 4]), |_| rng.gen_range(0.1..0.45));
        let b = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 4, 4]), |_| rng.gen_range(0.55..0.9));
        let spec = AffineSpec::Rescale { scale_factor: 1.0 };
        let report = check_gradients("er", &[a, b], DEFAULT_STEP, DEFAULT_TOLERANCE, |t, v| {
            er_loss_g(t, v[0], v[1], &spec).unwrap()
        });
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    proptest! {
        #[test]
        fn er_symmetry_and_nonnegativity(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = norm_cam(Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(0.0..1.0)));
            let b = norm_cam(Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(0.0..1.0)));
            let l_ab = er_loss(&a, &b, &AffineSpec::Identity).unwrap();
            let l_ba = er_loss(&b, &a, &AffineSpec::Identity).unwrap();
            prop_assert!((l_ab - l_ba).abs() < 1e-12);
            prop_assert!(l_ab >= 0.0);
            let equal = a.data.iter().zip(b.data.iter()).all(|(x, y)| x == y);
            prop_assert_eq!(l_ab == 0.0, equal);
        }
    }
}
