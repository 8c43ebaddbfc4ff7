//! Multi-resolution cubic B-spline FFD registration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{image_pyramid, ImageGrid, LabelMap};
use crate::par;
use crate::registration::{decimate_mask, pyramid_depth, VARIANCE_FLOOR};
use crate::transform::{
    bending_energy, bending_energy_gradient, sample_bilinear, sample_bilinear_grad, to_field,
    BSplineFFD, DisplacementField, Geometry,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Global normalized cross correlation over the mask.
    Ncc,
    /// Mean squared difference, normalized by the reference variance.
    Ssd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FfdParams {
    /// Control point spacing in mm; `None` means 8 finest pixels.
    pub control_spacing: Option<f64>,
    pub levels: usize,
    pub max_iters_per_level: usize,
    pub bending_weight: f64,
    /// Stop once the largest control update falls below this fraction of
    /// the control spacing.
    pub step_tolerance: f64,
    pub similarity: Similarity,
}

impl Default for FfdParams {
    fn default() -> Self {
        Self {
            control_spacing: None,
            levels: 3,
            max_iters_per_level: 300,
            bending_weight: 0.01,
            step_tolerance: 1e-6,
            similarity: Similarity::Ncc,
        }
    }
}

impl FfdParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.control_spacing {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "control spacing must be > 0, got {s}"
                )));
            }
        }
        if !(self.bending_weight >= 0.0) || !self.bending_weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bending weight must be >= 0, got {}",
                self.bending_weight
            )));
        }
        if self.levels < 1 || !(self.step_tolerance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid ffd parameters {self:?}"
            )));
        }
        Ok(())
    }

    pub fn spacing_for(&self, spacing: [f64; 2]) -> f64 {
        self.control_spacing
            .unwrap_or(8.0 * spacing[0].min(spacing[1]))
    }
}

/// Outcome of [`ffd_register`].
#[derive(Clone, Debug)]
pub struct FfdResult {
    pub ffd: BSplineFFD,
    /// `init + ffd` on the reference grid.
    pub field: DisplacementField,
    /// Objective value after every accepted step, per level, coarse to fine.
    pub trace: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// `J = -similarity(ref, flo ∘ (init + ffd)) + λ · bending_energy(ffd)` on
/// one resolution level.
pub struct FfdObjective<'a> {
    reference: &'a ImageGrid,
    floating: &'a ImageGrid,
    init: &'a DisplacementField,
    geometry: Geometry,
    pixels: Vec<usize>,
    similarity: Similarity,
    bending_weight: f64,
}

struct Warp {
    values: Vec<f64>,
    grads: Vec<[f64; 2]>,
}

impl<'a> FfdObjective<'a> {
    pub fn new(
        reference: &'a ImageGrid,
        floating: &'a ImageGrid,
        init: &'a DisplacementField,
        mask: Option<&LabelMap>,
        similarity: Similarity,
        bending_weight: f64,
    ) -> Result<Self> {
        let geometry = Geometry::of(reference);
        if init.geometry() != geometry {
            return Err(Error::GeometryMismatch(
                "initial field does not match the reference grid".into(),
            ));
        }
        let pixels: Vec<usize> = match mask {
            Some(m) => {
                reference.require_geometry(m, "ffd mask")?;
                (0..m.len()).filter(|&i| m.data()[i] != 0).collect()
            }
            None => (0..reference.len()).collect(),
        };
        if pixels.len() < 2 {
            return Err(Error::EmptyMask(format!(
                "ffd mask selects {} pixel(s)",
                pixels.len()
            )));
        }
        Ok(Self {
            reference,
            floating,
            init,
            geometry,
            pixels,
            similarity,
            bending_weight,
        })
    }

    /// Warped floating values (and their spatial gradients in mm⁻¹ when
    /// `with_grad`) at the selected pixels.
    fn warp(&self, ffd: &BSplineFFD, with_grad: bool) -> Warp {
        let g = self.geometry;
        let fs = self.floating.spacing();
        let (fw, fh) = (self.floating.width(), self.floating.height());
        let src = self.floating.data();
        let out = par::map_slice(&self.pixels, |&i| {
            let (x, y) = (i % g.width, i / g.width);
            let p = g.point(x, y);
            let d0 = self.init.get(x, y);
            let d1 = ffd.displacement_unchecked(p);
            let (u, v) = (
                (p[0] + d0[0] + d1[0]) / fs[0],
                (p[1] + d0[1] + d1[1]) / fs[1],
            );
            if with_grad {
                let (val, du, dv) = sample_bilinear_grad(src, fw, fh, u, v);
                (val, [du / fs[0], dv / fs[1]])
            } else {
                (sample_bilinear(src, fw, fh, u, v), [0.0, 0.0])
            }
        });
        let (values, grads) = out.into_iter().unzip();
        Warp { values, grads }
    }

    fn reference_values(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|&i| self.reference.data()[i] as f64)
            .collect()
    }

    /// Similarity and its derivative with respect to each warped value.
    fn similarity_terms(&self, r: &[f64], w: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
        let n = r.len() as f64;
        let rm = r.iter().sum::<f64>() / n;
        let wm = w.iter().sum::<f64>() / n;
        match self.similarity {
            Similarity::Ncc => {
                let (mut srw, mut srr, mut sww) = (0.0, 0.0, 0.0);
                for (a, b) in r.iter().zip(w) {
                    srw += (a - rm) * (b - wm);
                    srr += (a - rm) * (a - rm);
                    sww += (b - wm) * (b - wm);
                }
                if srr / n <= VARIANCE_FLOOR || sww / n <= VARIANCE_FLOOR {
                    return (
                        0.0,
                        if with_grad {
                            vec![0.0; r.len()]
                        } else {
                            Vec::new()
                        },
                    );
                }
                let denom = (srr * sww).sqrt();
                let s = srw / denom;
                let grad = if with_grad {
                    r.iter()
                        .zip(w)
                        .map(|(a, b)| (a - rm) / denom - s * (b - wm) / sww)
                        .collect()
                } else {
                    Vec::new()
                };
                (s, grad)
            }
            Similarity::Ssd => {
                let var = r.iter().map(|a| (a - rm) * (a - rm)).sum::<f64>() / n;
                let scale = 1.0 / (n * var.max(VARIANCE_FLOOR));
                let s = -scale * r.iter().zip(w).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
                let grad = if with_grad {
                    r.iter()
                        .zip(w)
                        .map(|(a, b)| -2.0 * scale * (b - a))
                        .collect()
                } else {
                    Vec::new()
                };
                (s, grad)
            }
        }
    }

    pub fn value(&self, ffd: &BSplineFFD) -> f64 {
        let r = self.reference_values();
        let warp = self.warp(ffd, false);
        let (s, _) = self.similarity_terms(&r, &warp.values, false);
        -s + self.bending_weight * bending_energy(ffd)
    }

    /// Similarity part of the objective only, without the bending term.
    pub fn similarity_value(&self, ffd: &BSplineFFD) -> f64 {
        let r = self.reference_values();
        let (s, _) = self.similarity_terms(&r, &self.warp(ffd, false).values, false);
        s
    }

    /// Objective value and its analytic gradient with respect to every
    /// control displacement.
    pub fn value_and_gradient(&self, ffd: &BSplineFFD) -> (f64, Vec<[f64; 2]>) {
        let (s, mut grad) = self.similarity_gradient(ffd);
        let mut value = -s;
        for g in grad.iter_mut() {
            g[0] = -g[0];
            g[1] = -g[1];
        }
        if self.bending_weight > 0.0 {
            value += self.bending_weight * bending_energy(ffd);
            for (g, b) in grad.iter_mut().zip(bending_energy_gradient(ffd)) {
                g[0] += self.bending_weight * b[0];
                g[1] += self.bending_weight * b[1];
            }
        }
        (value, grad)
    }

    /// Similarity and its gradient with respect to the control displacements.
    pub fn similarity_gradient(&self, ffd: &BSplineFFD) -> (f64, Vec<[f64; 2]>) {
        let r = self.reference_values();
        let warp = self.warp(ffd, true);
        let (s, dsdw) = self.similarity_terms(&r, &warp.values, true);
        let [nx, _] = ffd.dims();
        let nc = ffd.control().len();
        let g = self.geometry;
        // pixels are sorted, so split them into image rows for a fixed-order reduction
        let mut starts = vec![0usize];
        for k in 1..self.pixels.len() {
            if self.pixels[k] / g.width != self.pixels[k - 1] / g.width {
                starts.push(k);
            }
        }
        starts.push(self.pixels.len());
        let flat = par::sum_rows(starts.len() - 1, 2 * nc, |row| {
            let mut acc = vec![0.0; 2 * nc];
            for k in starts[row]..starts[row + 1] {
                let i = self.pixels[k];
                let p = g.point(i % g.width, i / g.width);
                let (ix, wx) = ffd.axis_weights(p[0], 0);
                let (iy, wy) = ffd.axis_weights(p[1], 1);
                let gx = dsdw[k] * warp.grads[k][0];
                let gy = dsdw[k] * warp.grads[k][1];
                for (b, wyb) in wy.iter().enumerate() {
                    for (a, wxa) in wx.iter().enumerate() {
                        let c = (iy + b) * nx + ix + a;
                        let w = wxa * wyb;
                        acc[2 * c] += w * gx;
                        acc[2 * c + 1] += w * gy;
                    }
                }
            }
            acc
        });
        (s, flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }
}

/// Conjugate-gradient descent (Polak-Ribière) with a backtracking line
/// search. Returns the accepted objective values and the iteration count.
fn optimize(
    objective: &FfdObjective<'_>,
    ffd: &mut BSplineFFD,
    max_iters: usize,
    tolerance: f64,
    max_step: f64,
) -> Result<(Vec<f64>, usize)> {
    let (mut value, mut grad) = objective.value_and_gradient(ffd);
    if !value.is_finite() {
        return Err(Error::Numeric("ffd objective is not finite".into()));
    }
    let mut trace = vec![value];
    let mut dir: Vec<[f64; 2]> = grad.iter().map(|g| [-g[0], -g[1]]).collect();
    let mut alpha_scale = 1.0;
    let spacing = ffd.spacing();
    let mut iters = 0;
    while iters < max_iters {
        let dmax = dir
            .iter()
            .map(|d| d[0].abs().max(d[1].abs()))
            .fold(0.0, f64::max);
        if dmax == 0.0 {
            break;
        }
        // first trial moves the largest control point by `alpha_scale * max_step`
        let mut alpha = alpha_scale * max_step / dmax;
        let slope: f64 = grad
            .iter()
            .zip(&dir)
            .map(|(g, d)| g[0] * d[0] + g[1] * d[1])
            .sum();
        let mut accepted = None;
        for _ in 0..20 {
            let mut trial = ffd.clone();
            for (c, d) in trial.control_mut().iter_mut().zip(&dir) {
                c[0] += alpha * d[0];
                c[1] += alpha * d[1];
            }
            let v = objective.value(&trial);
            if !v.is_finite() {
                return Err(Error::Numeric("ffd objective is not finite".into()));
            }
            if v < value + 1e-4 * alpha * slope.min(0.0) && v < value {
                accepted = Some((trial, v));
                break;
            }
            alpha *= 0.5;
            if alpha * dmax < tolerance * spacing {
                break;
            }
        }
        let Some((trial, v)) = accepted else { break };
        let step = alpha * dmax;
        *ffd = trial;
        trace.push(v);
        iters += 1;
        alpha_scale = (alpha * dmax / max_step * 2.0).min(1.0);
        if step < tolerance * spacing {
            break;
        }
        let (v2, g2) = objective.value_and_gradient(ffd);
        value = v2;
        let num: f64 = g2
            .iter()
            .zip(&grad)
            .map(|(a, b)| a[0] * (a[0] - b[0]) + a[1] * (a[1] - b[1]))
            .sum();
        let den: f64 = grad.iter().map(|g| g[0] * g[0] + g[1] * g[1]).sum();
        let beta = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
        grad = g2;
        for (d, g) in dir.iter_mut().zip(&grad) {
            d[0] = -g[0] + beta * d[0];
            d[1] = -g[1] + beta * d[1];
        }
        let descent: f64 = grad
            .iter()
            .zip(&dir)
            .map(|(g, d)| g[0] * d[0] + g[1] * d[1])
            .sum();
        if descent >= 0.0 {
            for (d, g) in dir.iter_mut().zip(&grad) {
                *d = [-g[0], -g[1]];
            }
        }
    }
    Ok((trace, iters))
}

/// Non-rigid registration of `floating` to `reference` on top of `init`.
///
/// The lattice spacing is fixed; coarser pyramid levels only change the
/// image resolution the objective is evaluated at. The returned field is
/// `init + ffd` on the reference grid.
pub fn ffd_register(
    reference: &ImageGrid,
    floating: &ImageGrid,
    init: &DisplacementField,
    params: &FfdParams,
    mask: Option<&LabelMap>,
) -> Result<FfdResult> {
    params.validate()?;
    let geometry = Geometry::of(reference);
    if init.geometry() != geometry {
        return Err(Error::GeometryMismatch(
            "initial field does not match the reference grid".into(),
        ));
    }
    if let Some(m) = mask {
        reference.require_geometry(m, "ffd mask")?;
        if m.data().iter().filter(|&&l| l != 0).count() < 2 {
            return Err(Error::EmptyMask("ffd mask is empty".into()));
        }
    }
    let spacing = params.spacing_for(reference.spacing());
    let mut ffd = BSplineFFD::for_geometry(&geometry, spacing)?;
    let depth = pyramid_depth(reference, params.levels, 16);
    let ref_pyr = image_pyramid(reference, depth)?;
    let flo_pyr = image_pyramid(floating, depth)?;
    let mask_pyr = match mask {
        Some(m) => Some(decimate_mask(m, depth)?),
        None => None,
    };
    let mut trace = Vec::new();
    let mut iterations = 0;
    for level in (0..depth).rev() {
        let ref_l = &ref_pyr[level];
        let g = Geometry::of(ref_l);
        let init_l = init.subsample(0, 0, 1 << level, g)?;
        let mask_l = mask_pyr.as_ref().map(|m| &m[level]);
        if level > 0 && mask_l.is_some_and(|m| m.data().iter().filter(|&&l| l != 0).count() < 16) {
            continue;
        }
        let objective = FfdObjective::new(
            ref_l,
            &flo_pyr[level],
            &init_l,
            mask_l,
            params.similarity,
            params.bending_weight,
        )?;
        let max_step = g.spacing[0].min(g.spacing[1]);
        let (t, n) = optimize(
            &objective,
            &mut ffd,
            params.max_iters_per_level,
            params.step_tolerance,
            max_step,
        )?;
        log::debug!(
            "ffd level {level}: {n} iterations, objective {:.6} -> {:.6}",
            t[0],
            t[t.len() - 1]
        );
        trace.push(t);
        iterations += n;
    }
    if ffd.control().iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite control displacement".into()));
    }
    let field = init.add(&to_field(&ffd, geometry))?;
    Ok(FfdResult {
        ffd,
        field,
        trace,
        iterations,
    })
}
