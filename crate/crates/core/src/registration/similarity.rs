//! Global and local normalized cross correlation.

use crate::error::{Error, Result};
use crate::grid::{smooth_buffer, ImageGrid, LabelMap};

/// Variances at or below this are treated as zero.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Pearson correlation of two equally long sample sequences, two-pass.
pub(crate) fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa / n <= VARIANCE_FLOOR || sbb / n <= VARIANCE_FLOOR {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson correlation of intensities over the non-zero pixels of `mask`
/// (all pixels without a mask). Zero when either side has no variance.
pub fn ncc(a: &ImageGrid, b: &ImageGrid, mask: Option<&LabelMap>) -> Result<f64> {
    a.require_geometry(b, "ncc")?;
    let selected: Vec<usize> = match mask {
        Some(m) => {
            a.require_geometry(m, "ncc mask")?;
            m.data()
                .iter()
                .enumerate()
                .filter(|(_, &l)| l != 0)
                .map(|(i, _)| i)
                .collect()
        }
        None => (0..a.len()).collect(),
    };
    if selected.len() < 2 {
        return Err(Error::EmptyMask(format!(
            "ncc mask selects {} pixel(s)",
            selected.len()
        )));
    }
    let va: Vec<f64> = selected.iter().map(|&i| a.data()[i] as f64).collect();
    let vb: Vec<f64> = selected.iter().map(|&i| b.data()[i] as f64).collect();
    Ok(pearson(&va, &vb))
}

/// Gaussian-windowed local correlation at every pixel.
///
/// Local means, variances and covariance come from [`gaussian_smooth`]-style
/// filtering of the (globally centered) images and their products. Pixels
/// where either local variance is below [`VARIANCE_FLOOR`] map to 0.
///
/// [`gaussian_smooth`]: crate::grid::gaussian_smooth
pub fn lncc_map(a: &ImageGrid, b: &ImageGrid, sigma: f64) -> Result<Vec<f64>> {
    a.require_geometry(b, "lncc_map")?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lncc sigma must be > 0, got {sigma}"
        )));
    }
    let (w, h) = (a.width(), a.height());
    let center = |img: &ImageGrid| {
        let v = img.to_f64();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.into_iter().map(|x| x - m).collect::<Vec<f64>>()
    };
    let ca = center(a);
    let cb = center(b);
    let aa: Vec<f64> = ca.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = cb.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| x * y).collect();
    let ma = smooth_buffer(&ca, w, h, sigma);
    let mb = smooth_buffer(&cb, w, h, sigma);
    let maa = smooth_buffer(&aa, w, h, sigma);
    let mbb = smooth_buffer(&bb, w, h, sigma);
    let mab = smooth_buffer(&ab, w, h, sigma);
    Ok((0..w * h)
        .map(|i| {
            let va = maa[i] - ma[i] * ma[i];
            let vb = mbb[i] - mb[i] * mb[i];
            if va < VARIANCE_FLOOR || vb < VARIANCE_FLOOR {
                0.0
            } else {
                ((mab[i] - ma[i] * mb[i]) / (va * vb).sqrt()).clamp(-1.0, 1.0)
            }
        })
        .collect())
}
