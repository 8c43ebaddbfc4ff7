//! Block matching and robust global transform estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelMap};
use crate::par;
use crate::registration::similarity::VARIANCE_FLOOR;
use crate::registration::{decimate_mask, pyramid_depth, Model};
use crate::transform::{resample_intensity, to_field, Affine2D, Geometry, Rigid2D, Transform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockMatchParams {
    /// Block edge length in pixels.
    pub block_size: usize,
    /// Search window half-width in pixels.
    pub search_radius: usize,
    /// Fraction of candidate blocks kept, highest intensity variance first.
    pub variance_keep_fraction: f64,
    /// Fraction of correspondences kept by the trimmed fit.
    pub lts_keep_fraction: f64,
    pub levels: usize,
    pub iters_per_level: usize,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        Self {
            block_size: 8,
            search_radius: 4,
            variance_keep_fraction: 0.5,
            lts_keep_fraction: 0.5,
            levels: 3,
            iters_per_level: 5,
        }
    }
}

impl BlockMatchParams {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        if self.block_size < 2
            || self.search_radius < 1
            || !frac_ok(self.variance_keep_fraction)
            || !frac_ok(self.lts_keep_fraction)
            || self.levels < 1
            || self.iters_per_level < 1
        {
            return Err(Error::InvalidArgument(format!(
                "invalid block matching parameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// A reference block center and its best match in the floating image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub ref_point: [f64; 2],
    pub flo_point: [f64; 2],
    pub score: f64,
}

struct Block {
    x: usize,
    y: usize,
    variance: f64,
}

/// Matches the highest-variance reference blocks against `floating`.
///
/// Blocks tile the reference without overlap. A block is a candidate when
/// its variance is non-zero and (with a mask) its center pixel is masked
/// in. For each kept block the integer displacement within the search
/// window maximizing NCC wins; ties go to the smallest displacement, then
/// to the lexicographically smallest `(dy, dx)`.
pub fn block_match(
    reference: &ImageGrid,
    floating: &ImageGrid,
    params: &BlockMatchParams,
    mask: Option<&LabelMap>,
) -> Result<Vec<Correspondence>> {
    params.validate()?;
    if reference.spacing() != floating.spacing() {
        return Err(Error::GeometryMismatch(
            "block_match needs equal pixel spacing".into(),
        ));
    }
    if let Some(m) = mask {
        reference.require_geometry(m, "block_match mask")?;
    }
    let bs = params.block_size;
    let (w, h) = (reference.width(), reference.height());
    if w < bs || h < bs {
        return Err(Error::TooFew(format!(
            "{w}x{h} image holds no {bs}x{bs} block"
        )));
    }
    let rdata = reference.data();
    let mut blocks = Vec::new();
    for by in (0..=h - bs).step_by(bs) {
        for bx in (0..=w - bs).step_by(bs) {
            if let Some(m) = mask {
                if m.get(bx + bs / 2, by + bs / 2) == 0 {
                    continue;
                }
            }
            let vals = block_values(rdata, w, bx, by, bs);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let variance =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            if variance > VARIANCE_FLOOR {
                blocks.push(Block {
                    x: bx,
                    y: by,
                    variance,
                });
            }
        }
    }
    if blocks.is_empty() {
        return Err(Error::TooFew(
            "no block survives the variance filter".into(),
        ));
    }
    // stable: equal variances keep raster order
    blocks.sort_by(|a, b| b.variance.total_cmp(&a.variance));
    let keep = ((params.variance_keep_fraction * blocks.len() as f64).ceil() as usize)
        .clamp(1, blocks.len());
    blocks.truncate(keep);

    let spacing = reference.spacing();
    let r = params.search_radius as isize;
    let (fw, fh) = (floating.width() as isize, floating.height() as isize);
    let fdata = floating.data();
    let found = par::map_slice(&blocks, |blk| {
        let rv = block_values(rdata, w, blk.x, blk.y, bs);
        let rm = rv.iter().sum::<f64>() / rv.len() as f64;
        let rc: Vec<f64> = rv.iter().map(|v| v - rm).collect();
        let rss: f64 = rc.iter().map(|v| v * v).sum();
        let mut best: Option<(f64, isize, isize, isize)> = None;
        for dy in -r..=r {
            for dx in -r..=r {
                let (fx, fy) = (blk.x as isize + dx, blk.y as isize + dy);
                if fx < 0 || fy < 0 || fx + bs as isize > fw || fy + bs as isize > fh {
                    continue;
                }
                let fv = block_values(fdata, fw as usize, fx as usize, fy as usize, bs);
                let fm = fv.iter().sum::<f64>() / fv.len() as f64;
                let (mut cross, mut fss) = (0.0, 0.0);
                for (a, b) in rc.iter().zip(&fv) {
                    let d = b - fm;
                    cross += a * d;
                    fss += d * d;
                }
                let score = if fss / fv.len() as f64 <= VARIANCE_FLOOR {
                    0.0
                } else {
                    (cross / (rss * fss).sqrt()).clamp(-1.0, 1.0)
                };
                let mag = dx * dx + dy * dy;
                let better = match best {
                    None => true,
                    Some((s, m, by_, bx_)) => {
                        score > s || (score == s && (mag, dy, dx) < (m, by_, bx_))
                    }
                };
                if better {
                    best = Some((score, mag, dy, dx));
                }
            }
        }
        best.map(|(score, _, dy, dx)| {
            let c = [
                (blk.x as f64 + (bs as f64 - 1.0) / 2.0) * spacing[0],
                (blk.y as f64 + (bs as f64 - 1.0) / 2.0) * spacing[1],
            ];
            Correspondence {
                ref_point: c,
                flo_point: [c[0] + dx as f64 * spacing[0], c[1] + dy as f64 * spacing[1]],
                score,
            }
        })
    });
    let out: Vec<Correspondence> = found.into_iter().flatten().collect();
    if out.is_empty() {
        return Err(Error::TooFew("no block has a valid search window".into()));
    }
    Ok(out)
}

fn block_values(data: &[f32], width: usize, x: usize, y: usize, bs: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(bs * bs);
    for row in y..y + bs {
        v.extend(
            data[row * width + x..row * width + x + bs]
                .iter()
                .map(|&p| p as f64),
        );
    }
    v
}

fn centroid(points: impl Iterator<Item = [f64; 2]>) -> [f64; 2] {
    let (mut s, mut n) = ([0.0, 0.0], 0.0);
    for p in points {
        s[0] += p[0];
        s[1] += p[1];
        n += 1.0;
    }
    [s[0] / n, s[1] / n]
}

/// Closed-form 2D Procrustes fit (rotation about the origin + translation).
fn fit_rigid(corrs: &[&Correspondence]) -> Result<Rigid2D> {
    let cp = centroid(corrs.iter().map(|c| c.ref_point));
    let cq = centroid(corrs.iter().map(|c| c.flo_point));
    let (mut dot, mut cross) = (0.0, 0.0);
    for c in corrs {
        let (px, py) = (c.ref_point[0] - cp[0], c.ref_point[1] - cp[1]);
        let (qx, qy) = (c.flo_point[0] - cq[0], c.flo_point[1] - cq[1]);
        dot += px * qx + py * qy;
        cross += px * qy - py * qx;
    }
    if dot == 0.0 && cross == 0.0 {
        return Err(Error::RegistrationFailed(
            "degenerate rigid configuration".into(),
        ));
    }
    let theta = cross.atan2(dot);
    let (s, c) = theta.sin_cos();
    Ok(Rigid2D::new(
        theta,
        cq[0] - (c * cp[0] - s * cp[1]),
        cq[1] - (s * cp[0] + c * cp[1]),
    ))
}

/// Least-squares affine fit from centered normal equations.
fn fit_affine(corrs: &[&Correspondence]) -> Result<Affine2D> {
    let cp = centroid(corrs.iter().map(|c| c.ref_point));
    let cq = centroid(corrs.iter().map(|c| c.flo_point));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let mut sq = [[0.0; 2]; 2];
    for c in corrs {
        let (px, py) = (c.ref_point[0] - cp[0], c.ref_point[1] - cp[1]);
        let (qx, qy) = (c.flo_point[0] - cq[0], c.flo_point[1] - cq[1]);
        sxx += px * px;
        sxy += px * py;
        syy += py * py;
        sq[0][0] += qx * px;
        sq[0][1] += qx * py;
        sq[1][0] += qy * px;
        sq[1][1] += qy * py;
    }
    let det = sxx * syy - sxy * sxy;
    let scale = (sxx + syy) * (sxx + syy);
    if !(det > 1e-10 * scale) || scale == 0.0 {
        return Err(Error::RegistrationFailed(
            "collinear points cannot determine an affine map".into(),
        ));
    }
    let inv = [[syy / det, -sxy / det], [-sxy / det, sxx / det]];
    let mut m = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            m[r][c] = sq[r][0] * inv[0][c] + sq[r][1] * inv[1][c];
        }
    }
    let a = Affine2D { m, t: [0.0, 0.0] };
    let mp = a.apply(cp);
    Ok(Affine2D {
        m,
        t: [cq[0] - mp[0], cq[1] - mp[1]],
    })
}

fn fit_model(corrs: &[&Correspondence], model: Model) -> Result<Transform> {
    match model {
        Model::Rigid => fit_rigid(corrs).map(Transform::Rigid),
        Model::Affine => fit_affine(corrs).map(Transform::Affine),
    }
}

/// Iterated least-trimmed-squares fit of a rigid or affine transform mapping
/// `ref_point` to `flo_point`. Rigid results rotate about the origin.
pub fn fit_transform_lts(
    corrs: &[Correspondence],
    model: Model,
    keep_fraction: f64,
) -> Result<Transform> {
    let min = model.min_correspondences();
    if corrs.len() < min {
        return Err(Error::TooFew(format!(
            "{} correspondences, {model:?} needs {min}",
            corrs.len()
        )));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep fraction {keep_fraction} outside (0, 1]"
        )));
    }
    let keep = ((keep_fraction * corrs.len() as f64).ceil() as usize).clamp(min, corrs.len());
    let all: Vec<&Correspondence> = corrs.iter().collect();
    let mut current = fit_model(&all, model)?;
    let mut kept: Vec<usize> = Vec::new();
    for _ in 0..10 {
        let mut order: Vec<(f64, usize)> = corrs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let q = current.apply(c.ref_point);
                (
                    (q[0] - c.flo_point[0]).powi(2) + (q[1] - c.flo_point[1]).powi(2),
                    i,
                )
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut next: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
        next.sort_unstable();
        if next == kept {
            break;
        }
        let subset: Vec<&Correspondence> = next.iter().map(|&i| &corrs[i]).collect();
        // a degenerate trimmed subset keeps the previous estimate
        match fit_model(&subset, model) {
            Ok(t) => current = t,
            Err(_) => break,
        }
        kept = next;
    }
    Ok(current)
}

/// Multi-resolution block-matching registration starting from identity.
///
/// Returns the transform mapping reference coordinates to floating
/// coordinates. Rigid results rotate about the reference physical center.
pub fn block_match_register(
    reference: &ImageGrid,
    floating: &ImageGrid,
    model: Model,
    params: &BlockMatchParams,
    mask: Option<&LabelMap>,
) -> Result<Transform> {
    let init = match model {
        Model::Rigid => Transform::Rigid(Rigid2D::identity(reference.physical_center())),
        Model::Affine => Transform::Affine(Affine2D::identity()),
    };
    block_match_register_from(reference, floating, model, params, mask, &init)
}

/// As [`block_match_register`], starting from `init`.
pub fn block_match_register_from(
    reference: &ImageGrid,
    floating: &ImageGrid,
    model: Model,
    params: &BlockMatchParams,
    mask: Option<&LabelMap>,
    init: &Transform,
) -> Result<Transform> {
    params.validate()?;
    if let Some(m) = mask {
        reference.require_geometry(m, "registration mask")?;
    }
    let center = reference.physical_center();
    let mut current = match (model, init) {
        (Model::Rigid, Transform::Rigid(r)) => Transform::Rigid(r.recentered(center)),
        (Model::Rigid, Transform::Affine(_)) => {
            return Err(Error::InvalidArgument(
                "rigid registration cannot start from an affine transform".into(),
            ))
        }
        (Model::Affine, t) => Transform::Affine(t.to_affine()),
    };
    let depth = pyramid_depth(reference, params.levels, 4 * params.block_size);
    let ref_pyr = crate::grid::image_pyramid(reference, depth)?;
    let flo_pyr = crate::grid::image_pyramid(floating, depth)?;
    let mask_pyr = match mask {
        Some(m) => Some(decimate_mask(m, depth)?),
        None => None,
    };

    for level in (0..depth).rev() {
        let ref_l = &ref_pyr[level];
        let flo_l = &flo_pyr[level];
        let geom = Geometry::of(ref_l);
        let probe = [
            [0.0, 0.0],
            geom.extent(),
            [geom.extent()[0], 0.0],
            [0.0, geom.extent()[1]],
        ];
        for _ in 0..params.iters_per_level {
            let warped = resample_intensity(flo_l, &to_field(&current, geom));
            let corrs = block_match(ref_l, &warped, params, mask_pyr.as_ref().map(|m| &m[level]))
                .map_err(|e| Error::RegistrationFailed(format!("level {level}: {e}")))?;
            let mapped: Vec<Correspondence> = corrs
                .iter()
                .map(|c| Correspondence {
                    flo_point: current.apply(c.flo_point),
                    ..*c
                })
                .collect();
            let fitted = fit_transform_lts(&mapped, model, params.lts_keep_fraction)
                .map_err(|e| Error::RegistrationFailed(format!("level {level}: {e}")))?;
            let next = match fitted {
                Transform::Rigid(r) => Transform::Rigid(r.recentered(center)),
                other => other,
            };
            if !next.is_finite() {
                return Err(Error::RegistrationFailed(
                    "non-finite transform parameters".into(),
                ));
            }
            let moved = probe
                .iter()
                .map(|&p| {
                    let (a, b) = (current.apply(p), next.apply(p));
                    (a[0] - b[0]).hypot(a[1] - b[1])
                })
                .fold(0.0, f64::max);
            current = next;
            if moved < 1e-3 * geom.spacing[0].min(geom.spacing[1]) {
                break;
            }
        }
    }
    if let Transform::Affine(a) = &current {
        if !a.is_plausible() {
            return Err(Error::RegistrationFailed(format!(
                "implausible affine determinant {}",
                a.det()
            )));
        }
    }
    Ok(current)
}
