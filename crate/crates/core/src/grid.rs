//! Raster containers, ROI handling, and smoothing/pyramid primitives.
//!
//! Pixel `(x, y)` has its center at physical position `(x * sx, y * sy)` mm.
//! Pyramid levels keep that origin, so physical coordinates are shared
//! between a grid and its downsampled copies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Pixel type stored in a [`Grid`].
pub trait Sample: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    /// Rejects values that break the raster's invariants.
    fn check(self, index: usize) -> Result<()>;
}

impl Sample for f32 {
    fn check(self, index: usize) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(index))
        }
    }
}

impl Sample for u8 {
    fn check(self, index: usize) -> Result<()> {
        if self <= MAX_LABEL {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "label {self} at index {index} is outside {{0,1,2}}"
            )))
        }
    }
}

pub const BACKGROUND: u8 = 0;
pub const BLOOD_POOL: u8 = 1;
pub const MYOCARDIUM: u8 = 2;
pub const MAX_LABEL: u8 = 2;
pub const NUM_LABELS: usize = 3;

/// Dense row-major 2D raster with physical pixel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    spacing: [f64; 2],
    data: Vec<T>,
}

/// Scalar intensity image.
pub type ImageGrid = Grid<f32>;
/// Label raster with values in {0, 1, 2}.
pub type LabelMap = Grid<u8>;

impl<T: Sample> Grid<T> {
    pub fn new(width: usize, height: usize, spacing: [f64; 2], data: Vec<T>) -> Result<Self> {
        check_shape(width, height, spacing)?;
        if data.len() != width * height {
            return Err(Error::SizeMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        for (i, v) in data.iter().enumerate() {
            v.check(i)?;
        }
        Ok(Self {
            width,
            height,
            spacing,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, spacing: [f64; 2], value: T) -> Result<Self> {
        Self::new(width, height, spacing, vec![value; width * height])
    }

    /// Builds a grid from a per-pixel function `f(x, y)`.
    pub fn from_fn<F>(width: usize, height: usize, spacing: [f64; 2], f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> T + Sync + Send,
    {
        check_shape(width, height, spacing)?;
        let mut data = vec![T::default(); width * height];
        par::fill_rows(&mut data, width, |y, row| {
            for (x, v) in row.iter_mut().enumerate() {
                *v = f(x, y);
            }
        });
        Self::new(width, height, spacing, data)
    }

    /// Internal constructor for data already known to be valid.
    pub(crate) fn from_parts(width: usize, height: usize, spacing: [f64; 2], data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            spacing,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: T) -> Result<()> {
        value.check(y * self.width + x)?;
        self.data[y * self.width + x] = value;
        Ok(())
    }

    pub fn same_geometry<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height && self.spacing == other.spacing
    }

    pub fn require_geometry<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {}x{} @ {:?} vs {}x{} @ {:?}",
                self.width, self.height, self.spacing, other.width, other.height, other.spacing
            )))
        }
    }

    /// Physical extent `((w-1) sx, (h-1) sy)` of the pixel-center lattice.
    pub fn extent(&self) -> [f64; 2] {
        [
            (self.width - 1) as f64 * self.spacing[0],
            (self.height - 1) as f64 * self.spacing[1],
        ]
    }

    pub fn physical_center(&self) -> [f64; 2] {
        let e = self.extent();
        [e[0] / 2.0, e[1] / 2.0]
    }

    /// Keeps every second pixel in each direction; spacing doubles.
    pub fn decimate(&self) -> Result<Self> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidArgument(format!(
                "cannot decimate a {}x{} grid",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(2 * x, 2 * y));
            }
        }
        Ok(Self::from_parts(
            w,
            h,
            [self.spacing[0] * 2.0, self.spacing[1] * 2.0],
            data,
        ))
    }
}

fn check_shape(width: usize, height: usize, spacing: [f64; 2]) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid dimensions must be positive, got {width}x{height}"
        )));
    }
    if !(spacing[0] > 0.0 && spacing[1] > 0.0 && spacing[0].is_finite() && spacing[1].is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

impl ImageGrid {
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub(crate) fn from_f64(width: usize, height: usize, spacing: [f64; 2], data: &[f64]) -> Self {
        Self::from_parts(
            width,
            height,
            spacing,
            data.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Anatomical structure evaluated on a label map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// Blood pool, label {1}.
    Endocardium,
    /// Blood pool plus myocardium, labels {1, 2}.
    Epicardium,
}

impl Structure {
    pub const ALL: [Structure; 2] = [Structure::Endocardium, Structure::Epicardium];

    #[inline]
    pub fn contains(self, label: u8) -> bool {
        match self {
            Structure::Endocardium => label == BLOOD_POOL,
            Structure::Epicardium => label == BLOOD_POOL || label == MYOCARDIUM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::Endocardium => "endocardium",
            Structure::Epicardium => "epicardium",
        }
    }
}

impl LabelMap {
    pub fn mask(&self, structure: Structure) -> Vec<bool> {
        self.data.iter().map(|&l| structure.contains(l)).collect()
    }

    pub fn count(&self, structure: Structure) -> usize {
        self.data.iter().filter(|&&l| structure.contains(l)).count()
    }

    pub fn is_background(&self) -> bool {
        self.data.iter().all(|&l| l == BACKGROUND)
    }

    /// Renders the epicardium mask as a 0/1 intensity image.
    pub fn to_binary_image(&self) -> ImageGrid {
        let data = self
            .data
            .iter()
            .map(|&l| {
                if Structure::Epicardium.contains(l) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        ImageGrid::from_parts(self.width, self.height, self.spacing, data)
    }
}

/// Inclusive-exclusive pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RoiBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "empty roi ({x0},{y0},{x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full<T>(grid: &Grid<T>) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: grid.width,
            y1: grid.height,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn fits<T>(&self, grid: &Grid<T>) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= grid.width && self.y1 <= grid.height
    }

    /// Physical offset of the box origin inside its parent grid.
    pub fn offset_mm(&self, spacing: [f64; 2]) -> [f64; 2] {
        [self.x0 as f64 * spacing[0], self.y0 as f64 * spacing[1]]
    }

    /// Grows the box by `margin` on every side, clamped to `width x height`.
    pub fn expand(&self, margin: usize, width: usize, height: usize) -> Self {
        Self {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        }
    }
}

/// Tightest box around the non-zero labels, grown by `margin` and clamped.
pub fn mask_bounding_box(labels: &LabelMap, margin: usize) -> Result<RoiBox> {
    bounding_box_of(labels.width, labels.height, |i| {
        labels.data[i] != BACKGROUND
    })
    .map(|b| b.expand(margin, labels.width, labels.height))
    .ok_or_else(|| Error::EmptyMask("label map is all background".into()))
}

pub(crate) fn bounding_box_of<F: Fn(usize) -> bool>(
    width: usize,
    height: usize,
    on: F,
) -> Option<RoiBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..height {
        for x in 0..width {
            if on(y * width + x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then_some(RoiBox { x0, y0, x1, y1 })
}

pub fn crop_to_roi<T: Sample>(grid: &Grid<T>, roi: RoiBox) -> Result<Grid<T>> {
    if !roi.fits(grid) {
        return Err(Error::OutOfBounds(format!(
            "{roi:?} in {}x{} grid",
            grid.width, grid.height
        )));
    }
    let mut data = Vec::with_capacity(roi.width() * roi.height());
    for y in roi.y0..roi.y1 {
        data.extend_from_slice(&grid.data[y * grid.width + roi.x0..y * grid.width + roi.x1]);
    }
    Ok(Grid::from_parts(
        roi.width(),
        roi.height(),
        grid.spacing,
        data,
    ))
}

/// Writes `patch` into a copy of `canvas` at the roi offset.
pub fn embed_roi<T: Sample>(patch: &Grid<T>, roi: RoiBox, canvas: &Grid<T>) -> Result<Grid<T>> {
    if !roi.fits(canvas) || roi.width() != patch.width || roi.height() != patch.height {
        return Err(Error::OutOfBounds(format!(
            "{}x{} patch at {roi:?} in {}x{} canvas",
            patch.width, patch.height, canvas.width, canvas.height
        )));
    }
    let mut out = canvas.clone();
    for y in 0..patch.height {
        let dst = (y + roi.y0) * canvas.width + roi.x0;
        out.data[dst..dst + patch.width]
            .copy_from_slice(&patch.data[y * patch.width..(y + 1) * patch.width]);
    }
    Ok(out)
}

/// Normalized Gaussian weights for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian filter on a row-major f64 buffer with edge replication.
pub(crate) fn smooth_buffer(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    par::fill_rows(&mut tmp, width, |y, row| {
        let src = &data[y * width..(y + 1) * width];
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sx = (x as isize + k as isize - r).clamp(0, width as isize - 1) as usize;
                acc += w * src[sx];
            }
            *out = acc;
        }
    });
    let mut out = vec![0.0; data.len()];
    par::fill_rows(&mut out, width, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sy = (y as isize + k as isize - r).clamp(0, height as isize - 1) as usize;
                acc += w * tmp[sy * width + x];
            }
            *o = acc;
        }
    });
    out
}

pub fn gaussian_smooth(image: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let out = smooth_buffer(&image.to_f64(), image.width, image.height, sigma);
    Ok(ImageGrid::from_f64(
        image.width,
        image.height,
        image.spacing,
        &out,
    ))
}

/// Smooths with sigma 1 then keeps every second pixel; spacing doubles.
pub fn downsample2x(image: &ImageGrid) -> Result<ImageGrid> {
    if image.width < 2 || image.height < 2 {
        return Err(Error::InvalidArgument(format!(
            "image too small to downsample: {}x{}",
            image.width, image.height
        )));
    }
    gaussian_smooth(image, 1.0)?.decimate()
}

/// Gaussian pyramid; level 0 is the input, each further level halves it.
pub(crate) fn image_pyramid(image: &ImageGrid, levels: usize) -> Result<Vec<ImageGrid>> {
    let mut out = vec![image.clone()];
    for _ in 1..levels.max(1) {
        let next = downsample2x(out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}

/// Cardiac phase of an atlas set or a case slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CardiacPhase {
    ED,
    ES,
}

impl CardiacPhase {
    pub const ALL: [CardiacPhase; 2] = [CardiacPhase::ED, CardiacPhase::ES];

    pub fn name(self) -> &'static str {
        match self {
            CardiacPhase::ED => "ED",
            CardiacPhase::ES => "ES",
        }
    }
}

/// An intensity image with its expert label image.
#[derive(Clone, Debug)]
pub struct AtlasPair {
    pub id: String,
    pub intensity: ImageGrid,
    pub labels: LabelMap,
}

impl AtlasPair {
    pub fn new(id: impl Into<String>, intensity: ImageGrid, labels: LabelMap) -> Result<Self> {
        intensity.require_geometry(&labels, "atlas intensity vs labels")?;
        Ok(Self {
            id: id.into(),
            intensity,
            labels,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AtlasSet {
    pub phase: CardiacPhase,
    pairs: Vec<AtlasPair>,
}

impl AtlasSet {
    pub fn new(phase: CardiacPhase, pairs: Vec<AtlasPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::TooFew("atlas set is empty".into()));
        }
        Ok(Self { phase, pairs })
    }

    pub fn pairs(&self) -> &[AtlasPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Copy without the atlas at `index`; fails if nothing would remain.
    pub fn without(&self, index: usize) -> Result<Self> {
        let pairs = self
            .pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != index)
            .map(|(_, p)| p.clone())
            .collect();
        Self::new(self.phase, pairs)
    }
}
