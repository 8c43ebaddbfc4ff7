//! Segmentation overlap, boundary distance and clinical quantities.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CardiacPhase, LabelMap, Structure};

/// Myocardial tissue density in g/mL.
pub const MYOCARDIAL_DENSITY: f64 = 1.05;

/// `2|A∩B| / (|A|+|B|)` of the structure masks; 1 when both are empty.
pub fn dice(a: &LabelMap, b: &LabelMap, structure: Structure) -> Result<f64> {
    a.require_geometry(b, "dice")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (structure.contains(x), structure.contains(y));
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mask pixels with a 4-neighbour outside the mask (or outside the image).
pub fn boundary(mask: &[bool], width: usize, height: usize) -> Vec<(usize, usize)> {
    let at = |x: i64, y: i64| {
        x >= 0
            && y >= 0
            && x < width as i64
            && y < height as i64
            && mask[y as usize * width + x as usize]
    };
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            if !(at(xi - 1, yi) && at(xi + 1, yi) && at(xi, yi - 1) && at(xi, yi + 1)) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Squared distance transform along one line (lower envelope of parabolas).
fn edt_1d(f: &[f64], scale2: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + scale2 * (q * q) as f64) - (f[p] + scale2 * (p * p) as f64))
                / (2.0 * scale2 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = scale2 * d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every pixel to the nearest
/// seed pixel.
fn squared_distance_map(
    seeds: &[(usize, usize)],
    width: usize,
    height: usize,
    spacing: [f64; 2],
) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; width * height];
    for &(x, y) in seeds {
        grid[y * width + x] = 0.0;
    }
    let mut cols = vec![0.0; width * height];
    let mut line = vec![0.0; height];
    let mut col = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        edt_1d(&col, spacing[1] * spacing[1], &mut line);
        for y in 0..height {
            cols[y * width + x] = line[y];
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        edt_1d(
            &cols[y * width..(y + 1) * width],
            spacing[0] * spacing[0],
            &mut out[y * width..(y + 1) * width],
        );
    }
    out
}

/// Symmetric Hausdorff distance in mm between the 4-connected boundaries of
/// the structure masks.
pub fn hausdorff(a: &LabelMap, b: &LabelMap, structure: Structure) -> Result<f64> {
    a.require_geometry(b, "hausdorff")?;
    let (w, h) = (a.width(), a.height());
    let ba = boundary(&a.mask(structure), w, h);
    let bb = boundary(&b.mask(structure), w, h);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::EmptyMask(format!(
            "hausdorff needs two non-empty {} masks",
            structure.name()
        )));
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        let dt = squared_distance_map(to, w, h, a.spacing());
        from.iter().map(|&(x, y)| dt[y * w + x]).fold(0.0, f64::max)
    };
    Ok(directed(&ba, &bb).max(directed(&bb, &ba)).sqrt())
}

/// Σ pixel area over the slices × thickness, in mL.
pub fn stack_volume(
    slices: &[LabelMap],
    structure: Structure,
    slice_thickness: f64,
) -> Result<f64> {
    if !(slice_thickness > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "slice thickness must be > 0, got {slice_thickness}"
        )));
    }
    let mm3: f64 = slices
        .iter()
        .map(|s| s.count(structure) as f64 * s.spacing()[0] * s.spacing()[1] * slice_thickness)
        .sum();
    Ok(mm3 / 1000.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EjectionFraction {
    pub value: f64,
    /// Set when `esv` fell outside `[0, edv]` and the value was clamped.
    pub clamped: bool,
}

pub fn ejection_fraction(edv: f64, esv: f64) -> Result<EjectionFraction> {
    if !(edv > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "EF needs EDV > 0, got {edv}"
        )));
    }
    let raw = (edv - esv) / edv;
    let value = raw.clamp(0.0, 1.0);
    Ok(EjectionFraction {
        value,
        clamped: value != raw,
    })
}

pub fn ventricular_mass(epi_volume: f64, endo_volume: f64, density: f64) -> Result<f64> {
    if !(epi_volume >= endo_volume && endo_volume >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mass needs epi >= endo >= 0, got epi {epi_volume}, endo {endo_volume}"
        )));
    }
    Ok((epi_volume - endo_volume) * density)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
}

/// Least-squares fit `truth = slope · estimate + intercept`, with Pearson r.
pub fn linear_regression(pairs: &[(f64, f64)]) -> Result<Regression> {
    if pairs.len() < 2 {
        return Err(Error::TooFew(format!(
            "regression needs >= 2 pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if !(sxx > 0.0) {
        return Err(Error::Numeric("estimates have no variance".into()));
    }
    let slope = sxy / sxx;
    let r = if syy > 0.0 {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(Regression {
        slope,
        intercept: my - slope * mx,
        r,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMode {
    Relative,
    Absolute,
}

/// Mean and population standard deviation of per-case errors.
pub fn error_stats(estimates: &[f64], truths: &[f64], mode: ErrorMode) -> Result<(f64, f64)> {
    if estimates.len() != truths.len() {
        return Err(Error::SizeMismatch {
            expected: truths.len(),
            actual: estimates.len(),
        });
    }
    if estimates.is_empty() {
        return Err(Error::TooFew("no cases".into()));
    }
    let errors = estimates
        .iter()
        .zip(truths)
        .map(|(&e, &t)| match mode {
            ErrorMode::Absolute => Ok((e - t).abs()),
            ErrorMode::Relative if t == 0.0 => Err(Error::InvalidArgument(
                "relative error with zero truth".into(),
            )),
            ErrorMode::Relative => Ok((e - t).abs() / t.abs()),
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_std(&errors))
}

/// Mean and population standard deviation, summed in order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Overlap and distance of one slice and structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub case: String,
    pub phase: CardiacPhase,
    pub slice: usize,
    pub structure: Structure,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hausdorff_mm: Option<f64>,
    pub spacing: [f64; 2],
}

impl SliceMetrics {
    pub fn compute(
        case: &str,
        phase: CardiacPhase,
        slice: usize,
        prediction: &LabelMap,
        truth: &LabelMap,
    ) -> Result<Vec<SliceMetrics>> {
        Structure::ALL
            .iter()
            .map(|&structure| {
                let hd = match hausdorff(prediction, truth, structure) {
                    Ok(v) => Some(v),
                    Err(Error::EmptyMask(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(SliceMetrics {
                    case: case.to_string(),
                    phase,
                    slice,
                    structure,
                    dice: dice(prediction, truth, structure)?,
                    hausdorff_mm: hd,
                    spacing: truth.spacing(),
                })
            })
            .collect()
    }
}

/// Clinical quantities of one case, estimated and (when truth exists) true.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Volumes {
    pub ed_endo_ml: Option<f64>,
    pub es_endo_ml: Option<f64>,
    pub ed_epi_ml: Option<f64>,
    pub es_epi_ml: Option<f64>,
    pub ef: Option<f64>,
    pub ef_clamped: bool,
    pub mass_g: Option<f64>,
}

impl Volumes {
    /// Volumes of the given phase stacks; EF needs both phases, mass uses ED.
    pub fn from_stacks(
        ed: Option<&[LabelMap]>,
        es: Option<&[LabelMap]>,
        thickness: f64,
        density: f64,
    ) -> Result<Self> {
        let mut v = Volumes::default();
        if let Some(s) = ed {
            v.ed_endo_ml = Some(stack_volume(s, Structure::Endocardium, thickness)?);
            v.ed_epi_ml = Some(stack_volume(s, Structure::Epicardium, thickness)?);
        }
        if let Some(s) = es {
            v.es_endo_ml = Some(stack_volume(s, Structure::Endocardium, thickness)?);
            v.es_epi_ml = Some(stack_volume(s, Structure::Epicardium, thickness)?);
        }
        if let (Some(edv), Some(esv)) = (v.ed_endo_ml, v.es_endo_ml) {
            if edv > 0.0 {
                let ef = ejection_fraction(edv, esv)?;
                v.ef = Some(ef.value);
                v.ef_clamped = ef.clamped;
            }
        }
        if let (Some(epi), Some(endo)) = (v.ed_epi_ml, v.ed_endo_ml) {
            v.mass_g = Some(ventricular_mass(epi, endo, density)?);
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub estimated: Volumes,
    pub truth: Option<Volumes>,
}

/// Cohort mean and population std of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Truth-on-estimate fit of one volume over the cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeFit {
    pub metric: String,
    pub n: usize,
    #[serde(flatten)]
    pub fit: Regression,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub slices: Vec<SliceMetrics>,
    pub cases: Vec<CaseMetrics>,
    pub summary: Vec<Summary>,
    pub regression: Vec<VolumeFit>,
}

impl MetricReport {
    pub fn new(slices: Vec<SliceMetrics>, cases: Vec<CaseMetrics>) -> Self {
        let mut summary = Vec::new();
        for phase in CardiacPhase::ALL {
            for structure in Structure::ALL {
                let rows: Vec<&SliceMetrics> = slices
                    .iter()
                    .filter(|s| s.phase == phase && s.structure == structure)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let d: Vec<f64> = rows.iter().map(|s| s.dice).collect();
                let h: Vec<f64> = rows.iter().filter_map(|s| s.hausdorff_mm).collect();
                let tag = format!("{}_{}", phase.name(), structure.name());
                let (m, s) = mean_std(&d);
                summary.push(Summary {
                    metric: format!("dice_{tag}"),
                    mean: m,
                    std: s,
                    n: d.len(),
                });
                if !h.is_empty() {
                    let (m, s) = mean_std(&h);
                    summary.push(Summary {
                        metric: format!("hausdorff_mm_{tag}"),
                        mean: m,
                        std: s,
                        n: h.len(),
                    });
                }
            }
        }
        let pairs = |f: fn(&Volumes) -> Option<f64>| -> Vec<(f64, f64)> {
            cases
                .iter()
                .filter_map(|c| Some((f(&c.estimated)?, f(c.truth.as_ref()?)?)))
                .collect()
        };
        let mut regression = Vec::new();
        for (name, f) in [
            ("ef", (|v: &Volumes| v.ef) as fn(&Volumes) -> Option<f64>),
            ("mass_g", |v: &Volumes| v.mass_g),
            ("ed_endo_ml", |v: &Volumes| v.ed_endo_ml),
            ("es_endo_ml", |v: &Volumes| v.es_endo_ml),
        ] {
            let all = pairs(f);
            if name.ends_with("_ml") {
                if let Ok(fit) = linear_regression(&all) {
                    regression.push(VolumeFit {
                        metric: name.to_string(),
                        n: all.len(),
                        fit,
                    });
                }
            }
            let (est, truth): (Vec<f64>, Vec<f64>) =
                all.into_iter().filter(|&(_, t)| t != 0.0).unzip();
            if let Ok((m, s)) = error_stats(&est, &truth, ErrorMode::Relative) {
                summary.push(Summary {
                    metric: format!("relative_error_{name}"),
                    mean: m,
                    std: s,
                    n: est.len(),
                });
            }
        }
        MetricReport {
            slices,
            cases,
            summary,
            regression,
        }
    }

    /// `case,phase,slice,structure,dice,hausdorff_mm`; an empty distance
    /// means one of the masks was empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,phase,slice,structure,dice,hausdorff_mm\n");
        for r in &self.slices {
            let hd = r
                .hausdorff_mm
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{}",
                r.case,
                r.phase.name(),
                r.slice,
                r.structure.name(),
                r.dice,
                hd
            );
        }
        s
    }
}
