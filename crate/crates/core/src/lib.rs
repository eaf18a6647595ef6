//! Perspective alignment of time-lapse crack imagery.
//!
//! Stages, in pipeline order:
//!
//! 1. [`scalespace`] builds a nonlinear (Perona–Malik / AOS) scale space, or a
//!    Gaussian/DoG pyramid for the linear baseline.
//! 2. [`detect`] finds Hessian, DoG or FAST keypoints and assigns orientations.
//! 3. [`descmatch`] describes keypoints and matches them with a ratio + mutual test.
//! 4. [`homography`] estimates the reference-to-target homography with adaptive RANSAC.
//! 5. [`crackmetrics`] warps the target back, segments the crack and measures it.
//! 6. [`pipeline`] wires the stages together and runs synthetic benchmarks.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod crackmetrics;
pub mod descmatch;
pub mod detect;
pub mod error;
pub mod homography;
pub mod imgio;
pub mod pipeline;
pub mod scalespace;

pub use crackmetrics::{compute_metrics, segment_crack, BinaryMask, CrackMetrics, MetricErrors};
pub use descmatch::{match_descriptors, BinaryDescriptor, Descriptors, FloatDescriptor, Match};
pub use detect::{DetectorKind, Keypoint};
pub use error::{Error, Result};
pub use homography::{dlt, ransac, Correspondence, Homography, RansacConfig, RansacResult};
pub use imgio::{bilinear_sample, load_image, save_image, Field, GrayImage};
pub use pipeline::{
    align, align_images, AlignConfig, AlignReport, Alignment, DetectorChoice, PerturbSpec,
};
pub use scalespace::{ScaleSchedule, ScaleSpace};
