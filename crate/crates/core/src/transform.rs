//! Spatial transforms, dense displacement fields and resampling.
//!
//! Every transform maps reference (target) physical coordinates to floating
//! (atlas) physical coordinates. Images are pulled back through a
//! [`DisplacementField`]: output pixel `p` samples the moving raster at
//! `p + field[p]`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, ImageGrid, LabelMap, Sample, BACKGROUND};
use crate::par;

/// Raster geometry without the payload.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    pub spacing: [f64; 2],
}

impl Geometry {
    pub fn of<T: Sample>(grid: &Grid<T>) -> Self {
        Self {
            width: grid.width(),
            height: grid.height(),
            spacing: grid.spacing(),
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn point(&self, x: usize, y: usize) -> [f64; 2] {
        [x as f64 * self.spacing[0], y as f64 * self.spacing[1]]
    }

    pub fn extent(&self) -> [f64; 2] {
        [
            (self.width - 1) as f64 * self.spacing[0],
            (self.height - 1) as f64 * self.spacing[1],
        ]
    }

    pub fn center(&self) -> [f64; 2] {
        let e = self.extent();
        [e[0] / 2.0, e[1] / 2.0]
    }
}

fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Rotation by `theta` about `center`, then translation by `(tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid2D {
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
    pub center: [f64; 2],
}

impl Rigid2D {
    pub fn new(theta: f64, tx: f64, ty: f64) -> Self {
        Self::about([0.0, 0.0], theta, tx, ty)
    }

    pub fn about(center: [f64; 2], theta: f64, tx: f64, ty: f64) -> Self {
        Self {
            theta: wrap_angle(theta),
            tx,
            ty,
            center,
        }
    }

    pub fn identity(center: [f64; 2]) -> Self {
        Self::about(center, 0.0, 0.0, 0.0)
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [
            c * dx - s * dy + self.center[0] + self.tx,
            s * dx + c * dy + self.center[1] + self.ty,
        ]
    }

    pub fn to_affine(&self) -> Affine2D {
        let (s, c) = self.theta.sin_cos();
        let m = [[c, -s], [s, c]];
        let t0 = self.apply([0.0, 0.0]);
        Affine2D { m, t: t0 }
    }

    /// Same mapping expressed with rotation about `center`.
    pub fn recentered(&self, center: [f64; 2]) -> Self {
        let image_of_center = self.apply(center);
        Self {
            theta: self.theta,
            tx: image_of_center[0] - center[0],
            ty: image_of_center[1] - center[1],
            center,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.tx.is_finite() && self.ty.is_finite()
    }
}

/// `p -> m p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2D {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine2D {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [tx, ty],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Affine2D) -> Affine2D {
        let a = &self.m;
        let b = &other.m;
        let m = [
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ];
        Affine2D {
            m,
            t: self.apply(other.t),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m
            .iter()
            .flatten()
            .chain(self.t.iter())
            .all(|v| v.is_finite())
    }

    /// Accepted registrations must have `|det|` within this range.
    pub const PLAUSIBLE_DET: (f64, f64) = (0.2, 5.0);

    pub fn is_plausible(&self) -> bool {
        let d = self.det().abs();
        self.is_finite() && d >= Self::PLAUSIBLE_DET.0 && d <= Self::PLAUSIBLE_DET.1
    }
}

/// A global linear transform of either family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Rigid(Rigid2D),
    Affine(Affine2D),
}

impl Transform {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        match self {
            Transform::Rigid(r) => r.apply(p),
            Transform::Affine(a) => a.apply(p),
        }
    }

    pub fn to_affine(&self) -> Affine2D {
        match self {
            Transform::Rigid(r) => r.to_affine(),
            Transform::Affine(a) => *a,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Transform::Rigid(r) => r.is_finite(),
            Transform::Affine(a) => a.is_finite(),
        }
    }

    /// Text form: `rigid theta tx ty` (rotation about the origin) or
    /// `affine m00 m01 m10 m11 tx ty`.
    pub fn to_text(&self) -> String {
        match self {
            Transform::Rigid(r) => {
                let o = r.recentered([0.0, 0.0]);
                format!("rigid {} {} {}\n", o.theta, o.tx, o.ty)
            }
            Transform::Affine(a) => {
                format!(
                    "affine {} {} {} {} {} {}\n",
                    a.m[0][0], a.m[0][1], a.m[1][0], a.m[1][1], a.t[0], a.t[1]
                )
            }
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut parts = text.split_whitespace();
        let kind = parts.next().unwrap_or_default();
        let vals: Vec<f64> = parts
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad transform number: {e}")))?;
        match (kind, vals.as_slice()) {
            ("rigid", [theta, tx, ty]) => Ok(Transform::Rigid(Rigid2D::new(*theta, *tx, *ty))),
            ("affine", [a, b, c, d, tx, ty]) => Ok(Transform::Affine(Affine2D {
                m: [[*a, *b], [*c, *d]],
                t: [*tx, *ty],
            })),
            _ => Err(Error::InvalidArgument(format!(
                "unrecognized transform text {text:?}"
            ))),
        }
    }
}

/// Anything that yields a displacement at a physical point.
pub trait Deformation: Sync {
    fn displacement(&self, p: [f64; 2]) -> [f64; 2];
}

impl Deformation for Rigid2D {
    fn displacement(&self, p: [f64; 2]) -> [f64; 2] {
        let q = self.apply(p);
        [q[0] - p[0], q[1] - p[1]]
    }
}

impl Deformation for Affine2D {
    fn displacement(&self, p: [f64; 2]) -> [f64; 2] {
        let q = self.apply(p);
        [q[0] - p[0], q[1] - p[1]]
    }
}

impl Deformation for Transform {
    fn displacement(&self, p: [f64; 2]) -> [f64; 2] {
        let q = self.apply(p);
        [q[0] - p[0], q[1] - p[1]]
    }
}

/// Uniform cubic B-spline basis at fractional offset `t ∈ [0, 1]`.
#[inline]
pub fn bspline_basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Cubic B-spline free-form deformation.
///
/// Lattice index `k` sits at physical coordinate `(k - 1) * spacing`, so the
/// lattice covers the reference domain plus one control point on each side
/// (and the extra point the cubic support needs at the far end).
#[derive(Clone, Debug, PartialEq)]
pub struct BSplineFFD {
    spacing: f64,
    dims: [usize; 2],
    domain: [f64; 2],
    control: Vec<[f64; 2]>,
}

impl BSplineFFD {
    /// Zero lattice covering a domain of physical extent `domain`.
    pub fn zeros(domain: [f64; 2], spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "control spacing must be > 0, got {spacing}"
            )));
        }
        if !(domain[0] >= 0.0 && domain[1] >= 0.0) {
            return Err(Error::InvalidArgument(format!("bad ffd domain {domain:?}")));
        }
        let dims = [
            (domain[0] / spacing).floor() as usize + 4,
            (domain[1] / spacing).floor() as usize + 4,
        ];
        Ok(Self {
            spacing,
            dims,
            domain,
            control: vec![[0.0, 0.0]; dims[0] * dims[1]],
        })
    }

    pub fn for_geometry(geometry: &Geometry, spacing: f64) -> Result<Self> {
        Self::zeros(geometry.extent(), spacing)
    }

    pub fn from_parts(
        domain: [f64; 2],
        spacing: f64,
        dims: [usize; 2],
        control: Vec<[f64; 2]>,
    ) -> Result<Self> {
        let mut ffd = Self::zeros(domain, spacing)?;
        if ffd.dims != dims || control.len() != dims[0] * dims[1] {
            return Err(Error::GeometryMismatch(format!(
                "lattice {dims:?} with {} points does not fit domain {domain:?} at spacing {spacing} (needs {:?})",
                control.len(),
                ffd.dims
            )));
        }
        if control.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite control displacement".into()));
        }
        ffd.control = control;
        Ok(ffd)
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn domain(&self) -> [f64; 2] {
        self.domain
    }

    pub fn control(&self) -> &[[f64; 2]] {
        &self.control
    }

    pub fn control_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.control
    }

    pub fn control_position(&self, i: usize, j: usize) -> [f64; 2] {
        [
            (i as f64 - 1.0) * self.spacing,
            (j as f64 - 1.0) * self.spacing,
        ]
    }

    pub fn max_displacement(&self) -> f64 {
        self.control
            .iter()
            .map(|c| c[0].hypot(c[1]))
            .fold(0.0, f64::max)
    }

    /// First lattice index and the four basis weights along one axis.
    #[inline]
    pub(crate) fn axis_weights(&self, coord: f64, axis: usize) -> (usize, [f64; 4]) {
        let u = coord / self.spacing;
        let i = (u.floor().max(0.0) as usize).min(self.dims[axis] - 4);
        (i, bspline_basis((u - i as f64).clamp(0.0, 1.0)))
    }

    /// Displacement without the domain check; outside points use the
    /// nearest lattice cell.
    #[inline]
    pub(crate) fn displacement_unchecked(&self, p: [f64; 2]) -> [f64; 2] {
        self.eval_unchecked(p)
    }

    #[inline]
    fn eval_unchecked(&self, p: [f64; 2]) -> [f64; 2] {
        let (ix, wx) = self.axis_weights(p[0], 0);
        let (iy, wy) = self.axis_weights(p[1], 1);
        let mut d = [0.0, 0.0];
        for (b, wyb) in wy.iter().enumerate() {
            let row = (iy + b) * self.dims[0] + ix;
            for (a, wxa) in wx.iter().enumerate() {
                let w = wxa * wyb;
                let c = self.control[row + a];
                d[0] += w * c[0];
                d[1] += w * c[1];
            }
        }
        d
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let tol = 1e-9 * self.spacing;
        p[0] >= -tol && p[1] >= -tol && p[0] <= self.domain[0] + tol && p[1] <= self.domain[1] + tol
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("ffd");
        let raw_name = format!("{stem}.raw");
        let raw_path = path.with_file_name(&raw_name);
        let header = format!(
            "ffd\ndims {} {}\nspacing {}\ndomain {} {}\ndata {}\n",
            self.dims[0], self.dims[1], self.spacing, self.domain[0], self.domain[1], raw_name
        );
        let bytes: Vec<u8> = self
            .control
            .iter()
            .flatten()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
        fs::write(path, header).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("ffd") {
            return Err(Error::format(path, "missing `ffd` magic line"));
        }
        let (mut dims, mut spacing, mut domain, mut data) = (None, None, None, None);
        for line in lines {
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or_default();
            let vals: Vec<&str> = it.collect();
            let nums = || {
                vals.iter()
                    .map(|v| v.parse::<f64>().ok())
                    .collect::<Option<Vec<f64>>>()
            };
            match (key, vals.len()) {
                ("dims", 2) => {
                    dims = vals
                        .iter()
                        .map(|v| v.parse::<usize>().ok())
                        .collect::<Option<Vec<_>>>()
                }
                ("spacing", 1) => spacing = nums().map(|v| v[0]),
                ("domain", 2) => domain = nums().map(|v| [v[0], v[1]]),
                ("data", 1) => data = Some(vals[0].to_string()),
                _ => return Err(Error::format(path, format!("bad ffd header line {line:?}"))),
            }
        }
        let missing = |k: &str| Error::format(path, format!("missing or bad `{k}`"));
        let dims = dims.ok_or_else(|| missing("dims"))?;
        let raw = path.with_file_name(data.ok_or_else(|| missing("data"))?);
        let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        let expected = dims[0] * dims[1];
        if bytes.len() != expected * 16 {
            return Err(Error::SizeMismatch {
                expected: expected * 2,
                actual: bytes.len() / 8,
            });
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let control = vals.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        Self::from_parts(
            domain.ok_or_else(|| missing("domain"))?,
            spacing.ok_or_else(|| missing("spacing"))?,
            [dims[0], dims[1]],
            control,
        )
    }
}

impl Deformation for BSplineFFD {
    fn displacement(&self, p: [f64; 2]) -> [f64; 2] {
        self.eval_unchecked(p)
    }
}

/// Cubic B-spline interpolation of the lattice displacements at `p`.
pub fn ffd_displacement(ffd: &BSplineFFD, p: [f64; 2]) -> Result<[f64; 2]> {
    if !ffd.contains(p) {
        return Err(Error::OutOfBounds(format!(
            "point {p:?} outside ffd domain {:?}",
            ffd.domain
        )));
    }
    Ok(ffd.eval_unchecked(p))
}

/// Per-pixel `(dx, dy)` displacements in mm on a reference grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    geometry: Geometry,
    data: Vec<[f64; 2]>,
}

impl DisplacementField {
    pub fn zeros(geometry: Geometry) -> Self {
        Self {
            geometry,
            data: vec![[0.0, 0.0]; geometry.len()],
        }
    }

    pub fn new(geometry: Geometry, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::SizeMismatch {
                expected: geometry.len(),
                actual: data.len(),
            });
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite displacement".into()));
        }
        Ok(Self { geometry, data })
    }

    pub fn constant(geometry: Geometry, d: [f64; 2]) -> Self {
        Self {
            geometry,
            data: vec![d; geometry.len()],
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.geometry.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    /// Bilinear sample at a physical point, replicating the border.
    pub fn sample(&self, p: [f64; 2]) -> [f64; 2] {
        let g = &self.geometry;
        let (x0, x1, fx) = bilinear_axis(p[0] / g.spacing[0], g.width);
        let (y0, y1, fy) = bilinear_axis(p[1] / g.spacing[1], g.height);
        let at = |x: usize, y: usize| self.data[y * g.width + x];
        let (a, b, c, d) = (at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1));
        let mut out = [0.0; 2];
        for k in 0..2 {
            out[k] =
                (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * c[k] + fx * d[k]);
        }
        out
    }

    /// Element-wise sum; used to stack an FFD on top of an initial field.
    pub fn add(&self, other: &DisplacementField) -> Result<DisplacementField> {
        if self.geometry != other.geometry {
            return Err(Error::GeometryMismatch(
                "displacement fields differ in geometry".into(),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| [a[0] + b[0], a[1] + b[1]])
            .collect();
        Ok(Self {
            geometry: self.geometry,
            data,
        })
    }

    /// Samples this field on a sub-grid starting at pixel `(x0, y0)` with a
    /// pixel stride of `step`; `geometry` describes the sub-grid.
    pub fn subsample(
        &self,
        x0: usize,
        y0: usize,
        step: usize,
        geometry: Geometry,
    ) -> Result<DisplacementField> {
        if x0 + (geometry.width - 1) * step >= self.geometry.width
            || y0 + (geometry.height - 1) * step >= self.geometry.height
        {
            return Err(Error::OutOfBounds(
                "sub-grid exceeds displacement field".into(),
            ));
        }
        let mut data = Vec::with_capacity(geometry.len());
        for y in 0..geometry.height {
            for x in 0..geometry.width {
                data.push(self.get(x0 + x * step, y0 + y * step));
            }
        }
        Ok(Self { geometry, data })
    }
}

/// Dense displacement `apply(p) - p` at every pixel center of `reference`.
pub fn to_field<D: Deformation + ?Sized>(
    deformation: &D,
    reference: Geometry,
) -> DisplacementField {
    let mut data = vec![[0.0, 0.0]; reference.len()];
    par::fill_rows(&mut data, reference.width, |y, row| {
        for (x, d) in row.iter_mut().enumerate() {
            *d = deformation.displacement(reference.point(x, y));
        }
    });
    DisplacementField {
        geometry: reference,
        data,
    }
}

/// `result[p] = inner(p + outer[p]) + outer[p]`: `outer` is applied first.
pub fn compose_fields(
    outer: &DisplacementField,
    inner: &DisplacementField,
) -> Result<DisplacementField> {
    if outer.geometry != inner.geometry {
        return Err(Error::GeometryMismatch(
            "compose_fields needs matching geometry".into(),
        ));
    }
    let g = outer.geometry;
    let mut data = vec![[0.0, 0.0]; g.len()];
    par::fill_rows(&mut data, g.width, |y, row| {
        for (x, d) in row.iter_mut().enumerate() {
            let p = g.point(x, y);
            let o = outer.get(x, y);
            let i = inner.sample([p[0] + o[0], p[1] + o[1]]);
            *d = [i[0] + o[0], i[1] + o[1]];
        }
    });
    Ok(DisplacementField { geometry: g, data })
}

/// Clamped lower/upper sample indices and fraction along one axis.
#[inline]
pub(crate) fn bilinear_axis(u: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let u = u.clamp(0.0, (n - 1) as f64);
    let i0 = (u.floor() as usize).min(n - 2);
    (i0, i0 + 1, u - i0 as f64)
}

/// Bilinear sample of a row-major buffer at pixel coordinates, border replicated.
#[inline]
pub(crate) fn sample_bilinear(data: &[f32], width: usize, height: usize, u: f64, v: f64) -> f64 {
    let (x0, x1, fx) = bilinear_axis(u, width);
    let (y0, y1, fy) = bilinear_axis(v, height);
    let a = data[y0 * width + x0] as f64;
    let b = data[y0 * width + x1] as f64;
    let c = data[y1 * width + x0] as f64;
    let d = data[y1 * width + x1] as f64;
    (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
}

/// Bilinear value and its analytic derivatives in pixel units. Outside the
/// domain the clamped direction has zero derivative.
#[inline]
pub(crate) fn sample_bilinear_grad(
    data: &[f32],
    width: usize,
    height: usize,
    u: f64,
    v: f64,
) -> (f64, f64, f64) {
    let inside_u = u > 0.0 && u < (width - 1) as f64;
    let inside_v = v > 0.0 && v < (height - 1) as f64;
    let (x0, x1, fx) = bilinear_axis(u, width);
    let (y0, y1, fy) = bilinear_axis(v, height);
    let a = data[y0 * width + x0] as f64;
    let b = data[y0 * width + x1] as f64;
    let c = data[y1 * width + x0] as f64;
    let d = data[y1 * width + x1] as f64;
    let value = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d);
    let du = if inside_u {
        (1.0 - fy) * (b - a) + fy * (d - c)
    } else {
        0.0
    };
    let dv = if inside_v {
        (1.0 - fx) * (c - a) + fx * (d - b)
    } else {
        0.0
    };
    (value, du, dv)
}

/// Pull-back bilinear resampling; out-of-domain samples take the border value.
pub fn resample_intensity(moving: &ImageGrid, field: &DisplacementField) -> ImageGrid {
    let g = field.geometry;
    let ms = moving.spacing();
    let (mw, mh) = (moving.width(), moving.height());
    let src = moving.data();
    let mut data = vec![0.0f32; g.len()];
    par::fill_rows(&mut data, g.width, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let p = g.point(x, y);
            let d = field.get(x, y);
            *out =
                sample_bilinear(src, mw, mh, (p[0] + d[0]) / ms[0], (p[1] + d[1]) / ms[1]) as f32;
        }
    });
    ImageGrid::from_parts(g.width, g.height, g.spacing, data)
}

/// Pull-back nearest-neighbor resampling; out-of-domain samples are background.
pub fn resample_labels(moving: &LabelMap, field: &DisplacementField) -> LabelMap {
    let g = field.geometry;
    let ms = moving.spacing();
    let (mw, mh) = (moving.width() as i64, moving.height() as i64);
    let mut data = vec![BACKGROUND; g.len()];
    par::fill_rows(&mut data, g.width, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let p = g.point(x, y);
            let d = field.get(x, y);
            let u = ((p[0] + d[0]) / ms[0]).round();
            let v = ((p[1] + d[1]) / ms[1]).round();
            if u.is_finite() && v.is_finite() {
                let (iu, iv) = (u as i64, v as i64);
                if iu >= 0 && iu < mw && iv >= 0 && iv < mh {
                    *out = moving.get(iu as usize, iv as usize);
                }
            }
        }
    });
    LabelMap::from_parts(g.width, g.height, g.spacing, data)
}

/// Value, first and second derivative stencils of the cubic B-spline at a knot.
const KNOT_VALUE: [f64; 3] = [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0];
const KNOT_D1: [f64; 3] = [-0.5, 0.0, 0.5];
const KNOT_D2: [f64; 3] = [1.0, -2.0, 1.0];

/// Second-derivative terms `(u_xx, u_yy, u_xy)` of one displacement component
/// at interior knot `(i, j)`, in lattice units (per control spacing).
fn knot_second_derivatives(ffd: &BSplineFFD, i: usize, j: usize, comp: usize) -> [f64; 3] {
    let nx = ffd.dims[0];
    let mut out = [0.0; 3];
    for b in 0..3 {
        for a in 0..3 {
            let c = ffd.control[(j + b - 1) * nx + (i + a - 1)][comp];
            out[0] += KNOT_D2[a] * KNOT_VALUE[b] * c;
            out[1] += KNOT_VALUE[a] * KNOT_D2[b] * c;
            out[2] += KNOT_D1[a] * KNOT_D1[b] * c;
        }
    }
    out
}

fn interior_knots(ffd: &BSplineFFD) -> usize {
    (ffd.dims[0] - 2) * (ffd.dims[1] - 2)
}

/// Mean over interior lattice knots of `u_xx² + u_yy² + 2 u_xy²`, summed over
/// both displacement components, with derivatives taken along the lattice
/// (so the value does not depend on the control spacing). Zero iff the
/// lattice is affine.
pub fn bending_energy(ffd: &BSplineFFD) -> f64 {
    let [nx, ny] = ffd.dims;
    let mut total = 0.0;
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            for comp in 0..2 {
                let [xx, yy, xy] = knot_second_derivatives(ffd, i, j, comp);
                total += xx * xx + yy * yy + 2.0 * xy * xy;
            }
        }
    }
    total / interior_knots(ffd) as f64
}

/// Gradient of [`bending_energy`] with respect to every control displacement.
pub fn bending_energy_gradient(ffd: &BSplineFFD) -> Vec<[f64; 2]> {
    let [nx, ny] = ffd.dims;
    let scale = 2.0 / interior_knots(ffd) as f64;
    let mut grad = vec![[0.0, 0.0]; ffd.control.len()];
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            for comp in 0..2 {
                let [xx, yy, xy] = knot_second_derivatives(ffd, i, j, comp);
                for b in 0..3 {
                    for a in 0..3 {
                        let k = (j + b - 1) * nx + (i + a - 1);
                        grad[k][comp] += scale
                            * (xx * KNOT_D2[a] * KNOT_VALUE[b]
                                + yy * KNOT_VALUE[a] * KNOT_D2[b]
                                + 2.0 * xy * KNOT_D1[a] * KNOT_D1[b]);
                    }
                }
            }
        }
    }
    grad
}
