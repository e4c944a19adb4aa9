//! Weakly-supervised referable-DR classification with lesion CAMs.
//!
//! A Siamese pair of weight-shared branches produces class activation maps on
//! an image and its affine-transformed copy; equivariant (ER) and cross (ECR)
//! L1 losses align them, a pixel-affinity matrix refines the maps, and a
//! feature-space attention-MIL head emits the classification. Everything is
//! differentiable through an in-crate reverse-mode tape.

pub mod affine;
pub mod autodiff;
pub mod cam;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod objective;
pub mod trainer;

pub use affine::AffineSpec;
pub use cam::{ActivationMap, CamHeadParams, CamKind, CorrelationMatrix, FeatureMap};
pub use data::{AugmentConfig, Sample, Split, SynthConfig};
pub use error::{Error, Result};
pub use metrics::{MetricsReport, SegmentationScore};
pub use mil::{AttentionWeights, InstanceBag, MilParams};
pub use model::{BackboneKind, BackboneSpec, HeadDims, ModelParams};
pub use objective::{LossBreakdown, LossWeights, MultiLabel};
pub use trainer::{Checkpoint, FitSummary, ForwardSettings, SiameseOutputs, TrainConfig};
