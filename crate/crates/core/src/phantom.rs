//! Synthetic short-axis slices with a crescent right ventricle.
//!
//! The RV epicardium is an ellipse with the LV disk carved out of it; the
//! blood pool is the same ellipse shrunk by the wall thickness minus the LV
//! disk grown by the wall thickness. The LV itself is drawn (myocardial ring
//! and blood) but labelled as background. Shape parameters are in pixels.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    AtlasPair, AtlasSet, CardiacPhase, ImageGrid, LabelMap, BACKGROUND, BLOOD_POOL, MYOCARDIUM,
};
use crate::io;
use crate::manifest::{AtlasEntry, AtlasManifest, CaseManifest, PhaseEntry, SliceEntry};
use crate::transform::{
    resample_intensity, resample_labels, to_field, BSplineFFD, DisplacementField, Geometry,
};

/// Minimum distance in pixels between any shape and the image border.
pub const BORDER: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub spacing: [f64; 2],
    pub rv_center: [f64; 2],
    pub rv_radii: [f64; 2],
    pub rv_wall: f64,
    pub lv_center: [f64; 2],
    pub lv_radius: f64,
    pub lv_wall: f64,
    pub background: f32,
    pub myocardium: f32,
    pub blood: f32,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            spacing: [1.0, 1.0],
            rv_center: [52.0, 62.0],
            rv_radii: [26.0, 22.0],
            rv_wall: 3.0,
            lv_center: [76.0, 64.0],
            lv_radius: 18.0,
            lv_wall: 5.0,
            background: 20.0,
            myocardium: 60.0,
            blood: 120.0,
            // 5% of the blood/background contrast
            noise_sigma: 5.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// The default anatomy at half size on a 64x64 grid.
    pub fn small() -> Self {
        Self {
            width: 64,
            height: 64,
            rv_center: [28.0, 32.0],
            rv_radii: [13.0, 11.0],
            rv_wall: 3.0,
            lv_center: [40.0, 33.0],
            lv_radius: 8.0,
            lv_wall: 4.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("phantom spec: {m}")));
        if self.width == 0 || self.height == 0 || !(self.spacing[0] > 0.0 && self.spacing[1] > 0.0)
        {
            return bad(format!(
                "bad geometry {}x{} spacing {:?}",
                self.width, self.height, self.spacing
            ));
        }
        if !(self.rv_wall >= 2.0) || !(self.lv_wall >= 2.0) {
            return bad(format!(
                "wall thickness must be >= 2 px (rv {}, lv {})",
                self.rv_wall, self.lv_wall
            ));
        }
        if !(self.rv_radii[0] > self.rv_wall + 1.0 && self.rv_radii[1] > self.rv_wall + 1.0) {
            return bad(format!(
                "rv radii {:?} too small for wall {}",
                self.rv_radii, self.rv_wall
            ));
        }
        if !(self.lv_radius > self.lv_wall + 1.0) {
            return bad(format!(
                "lv radius {} too small for wall {}",
                self.lv_radius, self.lv_wall
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        let fits = |c: [f64; 2], r: [f64; 2]| {
            c[0] - r[0] >= BORDER
                && c[1] - r[1] >= BORDER
                && c[0] + r[0] <= self.width as f64 - 1.0 - BORDER
                && c[1] + r[1] <= self.height as f64 - 1.0 - BORDER
        };
        if !fits(self.rv_center, self.rv_radii) || !fits(self.lv_center, [self.lv_radius; 2]) {
            return Err(Error::OutOfBounds(format!(
                "phantom shapes must keep {BORDER} px from the border of a {}x{} image",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Label of the continuous shape at pixel coordinates `(x, y)`, plus
    /// whether the point is inside the LV blood / LV wall.
    fn classify(&self, x: f64, y: f64) -> (u8, Tissue) {
        let in_ellipse = |rx: f64, ry: f64| {
            let dx = (x - self.rv_center[0]) / rx;
            let dy = (y - self.rv_center[1]) / ry;
            dx * dx + dy * dy <= 1.0
        };
        let dl = (x - self.lv_center[0]).hypot(y - self.lv_center[1]);
        let [rx, ry] = self.rv_radii;
        let t = self.rv_wall;
        let label = if in_ellipse(rx - t, ry - t) && dl > self.lv_radius + t {
            BLOOD_POOL
        } else if in_ellipse(rx, ry) && dl > self.lv_radius {
            MYOCARDIUM
        } else {
            BACKGROUND
        };
        let tissue = match label {
            BLOOD_POOL => Tissue::Blood,
            MYOCARDIUM => Tissue::Muscle,
            _ if dl <= self.lv_radius - self.lv_wall => Tissue::Blood,
            _ if dl <= self.lv_radius => Tissue::Muscle,
            _ => Tissue::Background,
        };
        (label, tissue)
    }

    /// Area in pixels of each label of the continuous shapes, by midpoint
    /// quadrature with `n × n` samples per pixel.
    pub fn label_areas(&self, n: usize) -> [f64; 3] {
        let mut counts = [0usize; 3];
        for y in 0..self.height * n {
            for x in 0..self.width * n {
                let px = (x as f64 + 0.5) / n as f64 - 0.5;
                let py = (y as f64 + 0.5) / n as f64 - 0.5;
                counts[self.classify(px, py).0 as usize] += 1;
            }
        }
        counts.map(|c| c as f64 / (n * n) as f64)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Tissue {
    Background,
    Muscle,
    Blood,
}

/// A generated slice: the noisy atlas pair and its noise-free intensities.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub pair: AtlasPair,
    pub clean: ImageGrid,
}

fn add_noise(image: &ImageGrid, sigma: f64, seed: u64) -> Result<ImageGrid> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = image
        .data()
        .iter()
        .map(|&v| v + normal.sample(&mut rng) as f32)
        .collect();
    ImageGrid::new(image.width(), image.height(), image.spacing(), data)
}

/// Rasterizes `spec` at pixel centers. Deterministic for a given seed.
pub fn make_phantom(spec: &PhantomSpec, id: impl Into<String>) -> Result<Phantom> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut labels = Vec::with_capacity(w * h);
    let mut clean = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (label, tissue) = spec.classify(x as f64, y as f64);
            labels.push(label);
            clean.push(match tissue {
                Tissue::Background => spec.background,
                Tissue::Muscle => spec.myocardium,
                Tissue::Blood => spec.blood,
            });
        }
    }
    // keep the blood pool strictly inside the epicardium
    let snapshot = labels.clone();
    for y in 0..h {
        for x in 0..w {
            if snapshot[y * w + x] != BLOOD_POOL {
                continue;
            }
            let outside = [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)]
                .iter()
                .any(|&(dx, dy)| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    nx < 0
                        || ny < 0
                        || nx >= w as i64
                        || ny >= h as i64
                        || snapshot[ny as usize * w + nx as usize] == 0
                });
            if outside {
                labels[y * w + x] = MYOCARDIUM;
                clean[y * w + x] = spec.myocardium;
            }
        }
    }
    let labels = LabelMap::new(w, h, spec.spacing, labels)?;
    let clean = ImageGrid::new(w, h, spec.spacing, clean)?;
    let noisy = add_noise(&clean, spec.noise_sigma, spec.seed)?;
    Ok(Phantom {
        pair: AtlasPair::new(id, noisy, labels)?,
        clean,
    })
}

/// Jitter ranges applied to the base spec for each cohort subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Variability {
    /// Joint RV/LV position shift, uniform in `±center_jitter` px per axis.
    pub center_jitter: f64,
    /// Relative radius change, uniform in `±radius_jitter`.
    pub radius_jitter: f64,
    /// RV wall thickness change in px, uniform in `±wall_jitter`.
    pub wall_jitter: f64,
    /// Largest displacement of the smooth warp applied to test cases, px.
    pub warp_max: f64,
    /// Control spacing of the test-case warp, px.
    pub warp_spacing: f64,
    /// End-systolic RV radius scale, uniform in this range.
    pub es_scale: [f64; 2],
}

impl Default for Variability {
    fn default() -> Self {
        Self {
            center_jitter: 8.0,
            radius_jitter: 0.15,
            wall_jitter: 1.0,
            warp_max: 5.0,
            warp_spacing: 24.0,
            es_scale: [0.8, 0.9],
        }
    }
}

impl Variability {
    pub fn none() -> Self {
        Self {
            center_jitter: 0.0,
            radius_jitter: 0.0,
            wall_jitter: 0.0,
            warp_max: 0.0,
            es_scale: [1.0, 1.0],
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortParams {
    pub atlases: usize,
    pub cases: usize,
    /// Slices per phase; each further slice is smaller (towards the apex).
    pub slices: usize,
    pub slice_thickness: f64,
    pub variability: Variability,
    pub seed: u64,
}

impl Default for CohortParams {
    fn default() -> Self {
        Self {
            atlases: 16,
            cases: 8,
            slices: 1,
            slice_thickness: 8.0,
            variability: Variability::default(),
            seed: 0,
        }
    }
}

/// One held-out slice with its truth and the warp that produced it.
#[derive(Clone, Debug)]
pub struct TestSlice {
    pub image: ImageGrid,
    pub truth: LabelMap,
    /// Field mapping case pixels onto the unwarped subject.
    pub field: DisplacementField,
    pub ffd: BSplineFFD,
    pub clean_labels: LabelMap,
}

#[derive(Clone, Debug)]
pub struct TestCase {
    pub id: String,
    pub slice_thickness: f64,
    pub ed: Vec<TestSlice>,
    pub es: Vec<TestSlice>,
}

impl TestCase {
    pub fn slices(&self, phase: CardiacPhase) -> &[TestSlice] {
        match phase {
            CardiacPhase::ED => &self.ed,
            CardiacPhase::ES => &self.es,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub ed: AtlasSet,
    pub es: AtlasSet,
    pub cases: Vec<TestCase>,
}

impl Cohort {
    pub fn atlases(&self, phase: CardiacPhase) -> &AtlasSet {
        match phase {
            CardiacPhase::ED => &self.ed,
            CardiacPhase::ES => &self.es,
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    if range > 0.0 {
        rng.gen_range(-range..=range)
    } else {
        0.0
    }
}

/// End-diastolic and end-systolic specs of one subject.
fn subject_specs(
    base: &PhantomSpec,
    v: &Variability,
    rng: &mut ChaCha8Rng,
) -> (PhantomSpec, PhantomSpec) {
    let shift = [jitter(rng, v.center_jitter), jitter(rng, v.center_jitter)];
    let mut ed = base.clone();
    ed.rv_center = [base.rv_center[0] + shift[0], base.rv_center[1] + shift[1]];
    ed.lv_center = [base.lv_center[0] + shift[0], base.lv_center[1] + shift[1]];
    ed.rv_radii = [
        base.rv_radii[0] * (1.0 + jitter(rng, v.radius_jitter)),
        base.rv_radii[1] * (1.0 + jitter(rng, v.radius_jitter)),
    ];
    ed.lv_radius = base.lv_radius * (1.0 + jitter(rng, v.radius_jitter / 2.0));
    ed.rv_wall = (base.rv_wall + jitter(rng, v.wall_jitter)).max(2.0);
    let s = if v.es_scale[1] > v.es_scale[0] {
        rng.gen_range(v.es_scale[0]..=v.es_scale[1])
    } else {
        v.es_scale[0]
    };
    let mut es = ed.clone();
    if s != 1.0 {
        es.rv_radii = [ed.rv_radii[0] * s, ed.rv_radii[1] * s];
        es.rv_wall = ed.rv_wall + 1.0;
        es.lv_radius = ed.lv_radius * 0.92;
    }
    (ed, es)
}

/// The spec of slice `k` (0 = basal): RV and LV shrink towards the apex.
fn slice_spec(spec: &PhantomSpec, k: usize) -> PhantomSpec {
    let f = 1.0 - 0.12 * k as f64;
    let mut s = spec.clone();
    s.rv_radii = [spec.rv_radii[0] * f, spec.rv_radii[1] * f];
    s.lv_radius = spec.lv_radius * f;
    s
}

/// Smooth random FFD whose dense field peaks at exactly `max_px` pixels.
fn random_warp(
    geometry: &Geometry,
    spacing_px: f64,
    max_px: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BSplineFFD> {
    let unit = geometry.spacing[0].min(geometry.spacing[1]);
    let mut ffd = BSplineFFD::for_geometry(geometry, spacing_px * unit)?;
    if max_px <= 0.0 {
        return Ok(ffd);
    }
    for c in ffd.control_mut() {
        *c = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    }
    let peak = to_field(&ffd, *geometry)
        .data()
        .iter()
        .map(|d| d[0].hypot(d[1]))
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 {
        max_px * unit / peak
    } else {
        0.0
    };
    for c in ffd.control_mut() {
        *c = [c[0] * scale, c[1] * scale];
    }
    Ok(ffd)
}

/// `params.atlases` atlas subjects (ED and ES sets, `params.slices` slices
/// each) and `params.cases` held-out subjects warped by known smooth FFDs.
pub fn make_cohort(base: &PhantomSpec, params: &CohortParams) -> Result<Cohort> {
    if params.atlases < 3 {
        return Err(Error::InvalidArgument(format!(
            "a cohort needs >= 3 atlases, got {}",
            params.atlases
        )));
    }
    if params.slices < 1 || !(params.slice_thickness > 0.0) {
        return Err(Error::InvalidArgument(
            "cohort needs >= 1 slice and positive thickness".into(),
        ));
    }
    base.validate()?;
    let v = &params.variability;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut ed_pairs = Vec::new();
    let mut es_pairs = Vec::new();
    for i in 0..params.atlases {
        let (ed, es) = subject_specs(base, v, &mut rng);
        for k in 0..params.slices {
            for (spec, out, tag) in [(&ed, &mut ed_pairs, "ed"), (&es, &mut es_pairs, "es")] {
                let mut s = slice_spec(spec, k);
                s.seed = rng.gen();
                let id = format!("atlas{i:02}_s{k}_{tag}");
                out.push(make_phantom(&s, id)?.pair);
            }
        }
    }
    let mut cases = Vec::new();
    for c in 0..params.cases {
        let (ed, es) = subject_specs(base, v, &mut rng);
        let mut case = TestCase {
            id: format!("case{c:02}"),
            slice_thickness: params.slice_thickness,
            ed: vec![],
            es: vec![],
        };
        for k in 0..params.slices {
            let g = Geometry {
                width: base.width,
                height: base.height,
                spacing: base.spacing,
            };
            let ffd = random_warp(&g, v.warp_spacing, v.warp_max, &mut rng)?;
            let field = to_field(&ffd, g);
            for (spec, phase) in [(&ed, CardiacPhase::ED), (&es, CardiacPhase::ES)] {
                let mut s = slice_spec(spec, k);
                s.seed = rng.gen();
                let p = make_phantom(&s, "")?;
                let warped = resample_intensity(&p.clean, &field);
                let image = add_noise(&warped, s.noise_sigma, s.seed)?;
                let slice = TestSlice {
                    image,
                    truth: resample_labels(&p.pair.labels, &field),
                    field: field.clone(),
                    ffd: ffd.clone(),
                    clean_labels: p.pair.labels,
                };
                match phase {
                    CardiacPhase::ED => case.ed.push(slice),
                    CardiacPhase::ES => case.es.push(slice),
                }
            }
        }
        cases.push(case);
    }
    Ok(Cohort {
        ed: AtlasSet::new(CardiacPhase::ED, ed_pairs)?,
        es: AtlasSet::new(CardiacPhase::ES, es_pairs)?,
        cases,
    })
}

/// Paths of the manifests written by [`write_cohort`].
#[derive(Clone, Debug)]
pub struct CohortFiles {
    pub atlas_manifest: PathBuf,
    pub case_manifests: Vec<PathBuf>,
}

/// Writes every raster plus `atlas.json` and `case<i>.json` under `dir`.
pub fn write_cohort(cohort: &Cohort, dir: impl AsRef<Path>) -> Result<CohortFiles> {
    let dir = dir.as_ref();
    let mut atlases = Vec::new();
    for set in [&cohort.ed, &cohort.es] {
        for pair in set.pairs() {
            let image = PathBuf::from("atlases").join(format!("{}.hdr", pair.id));
            let labels = PathBuf::from("atlases").join(format!("{}_labels.hdr", pair.id));
            io::save_image(&pair.intensity, dir.join(&image))?;
            io::save_labels(&pair.labels, dir.join(&labels))?;
            atlases.push(AtlasEntry {
                id: pair.id.clone(),
                phase: set.phase,
                image,
                labels,
            });
        }
    }
    let atlas_manifest = dir.join("atlas.json");
    AtlasManifest { atlases }.write(&atlas_manifest)?;

    let mut case_manifests = Vec::new();
    for (i, case) in cohort.cases.iter().enumerate() {
        let mut phases = std::collections::BTreeMap::new();
        for phase in CardiacPhase::ALL {
            let mut slices = Vec::new();
            for (k, s) in case.slices(phase).iter().enumerate() {
                let stem = format!("{}_{}_s{k}", case.id, phase.name().to_lowercase());
                let image = PathBuf::from("cases").join(format!("{stem}.hdr"));
                let truth = PathBuf::from("cases").join(format!("{stem}_truth.hdr"));
                io::save_image(&s.image, dir.join(&image))?;
                io::save_labels(&s.truth, dir.join(&truth))?;
                s.ffd
                    .save(dir.join("cases").join(format!("{stem}_warp.ffd")))?;
                slices.push(SliceEntry {
                    image,
                    truth: Some(truth),
                });
            }
            phases.insert(phase, PhaseEntry { slices });
        }
        let manifest = CaseManifest {
            case_id: case.id.clone(),
            spacing: Some(
                case.ed
                    .first()
                    .map(|s| s.image.spacing())
                    .unwrap_or([1.0, 1.0]),
            ),
            slice_thickness: case.slice_thickness,
            phases,
        };
        let path = dir.join(format!("case{i}.json"));
        manifest.write(&path)?;
        case_manifests.push(path);
    }
    Ok(CohortFiles {
        atlas_manifest,
        case_manifests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Structure;

    #[test]
    fn noise_free_phantom_has_three_levels() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let p = make_phantom(&spec, "p").unwrap();
        let mut levels: Vec<u32> = p
            .pair
            .intensity
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        levels.sort_unstable();
        levels.dedup();
        assert_eq!(levels.len(), 3);
    }

    #[test]
    fn same_seed_same_image() {
        let spec = PhantomSpec {
            seed: 42,
            ..Default::default()
        };
        let a = make_phantom(&spec, "a").unwrap();
        let b = make_phantom(&spec, "b").unwrap();
        assert_eq!(a.pair.intensity, b.pair.intensity);
        let c = make_phantom(&PhantomSpec { seed: 43, ..spec }, "c").unwrap();
        assert_ne!(a.pair.intensity, c.pair.intensity);
    }

    #[test]
    fn label_counts_match_shape_areas() {
        let spec = PhantomSpec::default();
        let p = make_phantom(&spec, "p").unwrap();
        let areas = spec.label_areas(16);
        for (label, area) in [(BLOOD_POOL, areas[1]), (MYOCARDIUM, areas[2])] {
            let count = p.pair.labels.data().iter().filter(|&&l| l == label).count() as f64;
            assert!(
                (count - area).abs() / area <= 0.05,
                "label {label}: {count} vs {area}"
            );
        }
    }

    #[test]
    fn blood_pool_is_enclosed() {
        let p = make_phantom(&PhantomSpec::default(), "p").unwrap();
        let l = &p.pair.labels;
        for y in 1..l.height() - 1 {
            for x in 1..l.width() - 1 {
                if l.get(x, y) == BLOOD_POOL {
                    for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
                        assert_ne!(l.get(nx, ny), BACKGROUND);
                    }
                }
            }
        }
        assert!(l.count(Structure::Endocardium) > 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let s = PhantomSpec {
            rv_wall: 1.5,
            ..Default::default()
        };
        assert!(make_phantom(&s, "x").is_err());
        let s = PhantomSpec {
            rv_center: [20.0, 62.0],
            ..Default::default()
        };
        assert!(matches!(make_phantom(&s, "x"), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn zero_variability_cohort_matches_base() {
        let base = PhantomSpec {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let params = CohortParams {
            atlases: 3,
            cases: 1,
            variability: Variability::none(),
            ..Default::default()
        };
        let cohort = make_cohort(&base, &params).unwrap();
        let reference = make_phantom(&base, "base").unwrap();
        for pair in cohort.ed.pairs().iter().chain(cohort.es.pairs()) {
            assert_eq!(pair.intensity, reference.pair.intensity);
            assert_eq!(pair.labels, reference.pair.labels);
        }
        assert_eq!(cohort.cases[0].ed[0].truth, reference.pair.labels);
    }

    #[test]
    fn warped_truth_is_self_consistent() {
        let params = CohortParams {
            atlases: 3,
            cases: 2,
            ..Default::default()
        };
        let cohort = make_cohort(&PhantomSpec::default(), &params).unwrap();
        for case in &cohort.cases {
            let s = &case.ed[0];
            assert_eq!(resample_labels(&s.clean_labels, &s.field), s.truth);
            let peak = s
                .field
                .data()
                .iter()
                .map(|d| d[0].hypot(d[1]))
                .fold(0.0, f64::max);
            assert!((peak - 5.0).abs() < 1e-9, "{peak}");
        }
        let again = make_cohort(&PhantomSpec::default(), &params).unwrap();
        assert_eq!(again.cases[1].es[0].image, cohort.cases[1].es[0].image);
        assert_eq!(
            again.ed.pairs()[2].intensity,
            cohort.ed.pairs()[2].intensity
        );
    }

    #[test]
    fn cohort_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = CohortParams {
            atlases: 3,
            cases: 1,
            ..Default::default()
        };
        let cohort = make_cohort(&PhantomSpec::default(), &params).unwrap();
        let files = write_cohort(&cohort, dir.path()).unwrap();
        let m = AtlasManifest::read(&files.atlas_manifest).unwrap();
        let ed = m
            .load_phase(&files.atlas_manifest, CardiacPhase::ED)
            .unwrap()
            .unwrap();
        assert_eq!(ed.len(), 3);
        assert_eq!(ed.pairs()[1].labels, cohort.ed.pairs()[1].labels);
        let c = CaseManifest::read(&files.case_manifests[0])
            .unwrap()
            .load(&files.case_manifests[0])
            .unwrap();
        assert_eq!(
            c.phases[&CardiacPhase::ES][0].truth.as_ref().unwrap(),
            &cohort.cases[0].es[0].truth
        );
    }
}
