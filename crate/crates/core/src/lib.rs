//! Multi-atlas segmentation propagation for 2D cardiac slices.
//!
//! The crate implements a coarse-to-fine pipeline: a rigid block-matching
//! pass localizes the heart, an affine plus B-spline free-form deformation
//! pass produces a rough segmentation fused from the best-ranked atlases,
//! and a final mask-restricted non-rigid pass is fused locally with a
//! multi-label STAPLE estimator regularized by a mean-field MRF.
//!
//! # Modules
//! - [`grid`], [`io`]: rasters, ROIs, smoothing, file formats.
//! - [`transform`]: rigid/affine/FFD transforms, displacement fields, resampling.
//! - [`registration`]: NCC/LNCC, block matching with trimmed least squares, FFD registration.
//! - [`fusion`]: majority voting, LNCC ranking, STAPLE, consensus ROI, MRF, STEPS.
//! - [`pipeline`]: the three-phase segmentation of a case.
//! - [`metrics`]: Dice, Hausdorff, volumes, EF, VM, regression.
//! - [`phantom`]: seeded synthetic cohorts with known truth.
//!
//! # Feature flags
//! - `parallel` (default): per-pixel kernels, per-atlas registrations and
//!   per-slice jobs run on rayon. Without it everything runs sequentially
//!   and produces bit-identical results.

// `!(x >= 0.0)` deliberately rejects NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod fusion;
pub mod grid;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod transform;

pub use error::{Error, ErrorClass, Result};
pub use grid::{AtlasPair, AtlasSet, CardiacPhase, ImageGrid, LabelMap, RoiBox, Structure};
