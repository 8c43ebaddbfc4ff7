//! Similarity measures, block-matching global registration and B-spline
//! FFD non-rigid registration.
//!
//! Every registration estimates the mapping from reference (target)
//! coordinates to floating (atlas) coordinates, so floating images and
//! labels are pulled back onto the reference grid.

mod block;
mod ffd;
mod similarity;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelMap};

pub use block::{
    block_match, block_match_register, block_match_register_from, fit_transform_lts,
    BlockMatchParams, Correspondence,
};
pub use ffd::{ffd_register, FfdObjective, FfdParams, FfdResult, Similarity};
pub use similarity::{lncc_map, ncc, VARIANCE_FLOOR};

/// Global transform model estimated by block matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Rigid,
    Affine,
}

impl Model {
    pub fn min_correspondences(self) -> usize {
        match self {
            Model::Rigid => 3,
            Model::Affine => 4,
        }
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rigid" => Ok(Model::Rigid),
            "affine" => Ok(Model::Affine),
            other => Err(Error::InvalidArgument(format!(
                "unknown model {other:?} (rigid|affine)"
            ))),
        }
    }
}

/// Number of pyramid levels (at most `levels`) whose coarsest image keeps a
/// smaller side of at least `min_side` pixels.
pub(crate) fn pyramid_depth(image: &ImageGrid, levels: usize, min_side: usize) -> usize {
    let side = image.width().min(image.height());
    let mut depth = 1;
    while depth < levels && (side >> depth) >= min_side {
        depth += 1;
    }
    depth
}

/// Mask pyramid matching [`crate::grid::image_pyramid`] geometry.
pub(crate) fn decimate_mask(mask: &LabelMap, levels: usize) -> Result<Vec<LabelMap>> {
    let mut out = vec![mask.clone()];
    for _ in 1..levels.max(1) {
        let next = out.last().unwrap().decimate()?;
        out.push(next);
    }
    Ok(out)
}
