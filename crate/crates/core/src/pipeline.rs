//! Three-phase coarse-to-fine segmentation of a case.
//!
//! Every registration maps target coordinates to atlas coordinates, so atlas
//! intensities and labels are pulled back onto the target grid with a single
//! resampling.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{majority_vote, steps_fuse, FusionConfig, FusionMode, FusionReport};
use crate::grid::{
    crop_to_roi, embed_roi, mask_bounding_box, AtlasPair, AtlasSet, CardiacPhase, ImageGrid,
    LabelMap, RoiBox, Structure, BACKGROUND,
};
use crate::manifest::LoadedCase;
use crate::metrics::{Volumes, MYOCARDIAL_DENSITY};
use crate::par;
use crate::registration::{
    block_match_register, block_match_register_from, ffd_register, BlockMatchParams, FfdParams,
    Model,
};
use crate::transform::{
    resample_intensity, resample_labels, to_field, Affine2D, Geometry, Rigid2D, Transform,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub block: BlockMatchParams,
    pub ffd: FfdParams,
    pub fusion: FusionConfig,
    /// Pixels added around the Phase I vote and the Phase III crop.
    pub roi_margin: usize,
    pub phase2_model: Model,
    /// 4-neighbour dilation of the Phase III vote before it masks the FFD.
    pub mask_dilation: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            block: BlockMatchParams::default(),
            ffd: FfdParams::default(),
            fusion: FusionConfig::default(),
            roi_margin: 10,
            phase2_model: Model::Affine,
            mask_dilation: 3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        self.ffd.validate()?;
        self.fusion.validate()
    }
}

/// A registration that was skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasFailure {
    pub phase: u8,
    pub atlas: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Localization {
    pub roi: RoiBox,
    /// Rigid target-to-atlas transform per atlas, in atlas-set order.
    pub transforms: Vec<Option<Transform>>,
    pub failures: Vec<AtlasFailure>,
}

#[derive(Clone, Debug)]
pub struct PhaseOutput {
    /// Labels on the full target grid.
    pub labels: LabelMap,
    pub report: FusionReport,
    pub failures: Vec<AtlasFailure>,
}

fn failure(phase: u8, atlas: &AtlasPair, e: &Error) -> AtlasFailure {
    log::warn!("phase {phase}: atlas {} skipped: {e}", atlas.id);
    AtlasFailure {
        phase,
        atlas: atlas.id.clone(),
        reason: e.to_string(),
    }
}

fn too_few(phase: u8, ok: usize, failures: &[AtlasFailure]) -> Error {
    let detail: Vec<String> = failures
        .iter()
        .map(|f| format!("{}: {}", f.atlas, f.reason))
        .collect();
    Error::TooFew(format!(
        "phase {phase}: {ok} registration(s) succeeded; failures [{}]",
        detail.join("; ")
    ))
}

/// Splits per-atlas results into successes (in order) and failures.
fn partition<T>(
    phase: u8,
    atlases: &[AtlasPair],
    results: Vec<Result<T>>,
) -> (Vec<(usize, T)>, Vec<AtlasFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push((i, v)),
            Err(e) => failed.push(failure(phase, &atlases[i], &e)),
        }
    }
    (ok, failed)
}

/// The same mapping on a grid whose origin sits at `offset` in the old one:
/// `p -> t(p + offset)`.
pub fn shift_domain(t: &Transform, offset: [f64; 2]) -> Transform {
    match t {
        Transform::Rigid(r) => Transform::Rigid(Rigid2D {
            center: [r.center[0] - offset[0], r.center[1] - offset[1]],
            tx: r.tx + offset[0],
            ty: r.ty + offset[1],
            ..*r
        }),
        Transform::Affine(a) => Transform::Affine(Affine2D {
            m: a.m,
            t: a.apply(offset),
        }),
    }
}

/// Phase I: rigid global registration of the target to every atlas, a
/// majority vote of the propagated labels, and its bounding box.
pub fn phase1_localize(
    target: &ImageGrid,
    atlases: &AtlasSet,
    config: &PipelineConfig,
) -> Result<Localization> {
    let pairs = atlases.pairs();
    if pairs.is_empty() {
        return Err(Error::TooFew("phase 1: no atlases".into()));
    }
    let g = Geometry::of(target);
    let results = par::map_slice(pairs, |a| -> Result<(Transform, LabelMap)> {
        let t = block_match_register(target, &a.intensity, Model::Rigid, &config.block, None)?;
        Ok((t, resample_labels(&a.labels, &to_field(&t, g))))
    });
    let (ok, failures) = partition(1, pairs, results);
    if ok.is_empty() {
        return Err(too_few(1, 0, &failures));
    }
    let mut transforms = vec![None; pairs.len()];
    let mut stack = Vec::with_capacity(ok.len());
    for (i, (t, labels)) in ok {
        transforms[i] = Some(t);
        stack.push(labels);
    }
    let vote = majority_vote(&stack)?;
    let roi = mask_bounding_box(&vote, config.roi_margin)
        .map_err(|_| Error::EmptyMask("phase 1: the propagated vote is all background".into()))?;
    Ok(Localization {
        roi,
        transforms,
        failures,
    })
}

/// Phase II: affine (or rigid) block matching on the ROI-cropped target,
/// seeded by Phase I, then FFD, then global top-fraction STEPS fusion.
pub fn phase2_rough(
    target: &ImageGrid,
    localization: &Localization,
    atlases: &AtlasSet,
    config: &PipelineConfig,
) -> Result<PhaseOutput> {
    let roi = localization.roi;
    let pairs = atlases.pairs();
    if localization.transforms.len() != pairs.len() {
        return Err(Error::SizeMismatch {
            expected: pairs.len(),
            actual: localization.transforms.len(),
        });
    }
    let crop = crop_to_roi(target, roi)?;
    let g = Geometry::of(&crop);
    let offset = roi.offset_mm(target.spacing());
    let results = par::map_range(pairs.len(), |i| -> Result<AtlasPair> {
        let a = &pairs[i];
        let seed = match &localization.transforms[i] {
            Some(t) => shift_domain(t, offset),
            None => Transform::Rigid(Rigid2D::about(g.center(), 0.0, offset[0], offset[1])),
        };
        let t = block_match_register_from(
            &crop,
            &a.intensity,
            config.phase2_model,
            &config.block,
            None,
            &seed,
        )?;
        let ffd = ffd_register(&crop, &a.intensity, &to_field(&t, g), &config.ffd, None)?;
        if !ffd.field.is_finite() {
            return Err(Error::RegistrationFailed("non-finite deformation".into()));
        }
        AtlasPair::new(
            a.id.clone(),
            resample_intensity(&a.intensity, &ffd.field),
            resample_labels(&a.labels, &ffd.field),
        )
    });
    let (ok, failures) = partition(2, pairs, results);
    if ok.len() < 2 {
        return Err(too_few(2, ok.len(), &failures));
    }
    let warped: Vec<AtlasPair> = ok.into_iter().map(|(_, p)| p).collect();
    let fused = steps_fuse(&crop, &warped, &config.fusion, FusionMode::GlobalTop)?;
    let canvas = LabelMap::filled(
        target.width(),
        target.height(),
        target.spacing(),
        BACKGROUND,
    )?;
    Ok(PhaseOutput {
        labels: embed_roi(&fused.labels, roi, &canvas)?,
        report: fused.report,
        failures,
    })
}

fn centroid(labels: &LabelMap) -> Option<[f64; 2]> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            if Structure::Epicardium.contains(labels.get(x, y)) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    let s = labels.spacing();
    (n > 0).then(|| [sx / n as f64 * s[0], sy / n as f64 * s[1]])
}

fn dilate(mask: &mut [bool], width: usize, height: usize, steps: usize) {
    for _ in 0..steps {
        let prev = mask.to_vec();
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                mask[i] = prev[i]
                    || (x > 0 && prev[i - 1])
                    || (x + 1 < width && prev[i + 1])
                    || (y > 0 && prev[i - width])
                    || (y + 1 < height && prev[i + width]);
            }
        }
    }
}

/// Phase III: affine alignment of each atlas' label image to the rough
/// segmentation, a majority-vote refinement mask, mask-restricted FFD, and
/// local STEPS fusion.
pub fn phase3_refine(
    target: &ImageGrid,
    rough: &LabelMap,
    atlases: &AtlasSet,
    config: &PipelineConfig,
) -> Result<PhaseOutput> {
    target.require_geometry(rough, "rough segmentation")?;
    let roi = mask_bounding_box(rough, config.roi_margin)
        .map_err(|_| Error::EmptyMask("phase 3: rough segmentation is all background".into()))?;
    let crop = crop_to_roi(target, roi)?;
    let rough_crop = crop_to_roi(rough, roi)?;
    let g = Geometry::of(&crop);
    let rough_centroid = centroid(&rough_crop)
        .ok_or_else(|| Error::EmptyMask("phase 3: empty rough epicardium".into()))?;
    let rough_binary = rough_crop.to_binary_image();
    let pairs = atlases.pairs();

    let affine = par::map_slice(pairs, |a| -> Result<(Transform, LabelMap)> {
        let c = centroid(&a.labels)
            .ok_or_else(|| Error::EmptyMask(format!("atlas {} has no epicardium", a.id)))?;
        let seed = Transform::Affine(Affine2D::translation(
            c[0] - rough_centroid[0],
            c[1] - rough_centroid[1],
        ));
        let t = block_match_register_from(
            &rough_binary,
            &a.labels.to_binary_image(),
            Model::Affine,
            &config.block,
            None,
            &seed,
        )?;
        Ok((t, resample_labels(&a.labels, &to_field(&t, g))))
    });
    let (aligned, mut failures) = partition(3, pairs, affine);
    if aligned.len() < 2 {
        return Err(too_few(3, aligned.len(), &failures));
    }
    let stack: Vec<LabelMap> = aligned.iter().map(|(_, (_, l))| l.clone()).collect();
    let vote = majority_vote(&stack)?;
    let mut mask: Vec<bool> = vote.data().iter().map(|&l| l != BACKGROUND).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask("phase 3: refinement mask is empty".into()));
    }
    dilate(&mut mask, g.width, g.height, config.mask_dilation);
    let mask_map = LabelMap::new(
        g.width,
        g.height,
        g.spacing,
        mask.iter().map(|&m| m as u8).collect(),
    )?;

    let refined = par::map_slice(&aligned, |(i, (t, _))| -> Result<AtlasPair> {
        let a = &pairs[*i];
        let ffd = ffd_register(
            &crop,
            &a.intensity,
            &to_field(t, g),
            &config.ffd,
            Some(&mask_map),
        )?;
        if !ffd.field.is_finite() {
            return Err(Error::RegistrationFailed("non-finite deformation".into()));
        }
        AtlasPair::new(
            a.id.clone(),
            resample_intensity(&a.intensity, &ffd.field),
            resample_labels(&a.labels, &ffd.field),
        )
    });
    let mut warped = Vec::new();
    for ((i, _), r) in aligned.iter().zip(refined) {
        match r {
            Ok(p) => warped.push(p),
            Err(e) => failures.push(failure(3, &pairs[*i], &e)),
        }
    }
    if warped.len() < 2 {
        return Err(too_few(3, warped.len(), &failures));
    }
    let fused = steps_fuse(&crop, &warped, &config.fusion, FusionMode::LocalN)?;
    let data = fused
        .labels
        .data()
        .iter()
        .zip(&mask)
        .map(|(&l, &m)| if m { l } else { BACKGROUND })
        .collect();
    let patch = LabelMap::new(g.width, g.height, g.spacing, data)?;
    let canvas = LabelMap::filled(
        target.width(),
        target.height(),
        target.spacing(),
        BACKGROUND,
    )?;
    Ok(PhaseOutput {
        labels: embed_roi(&patch, roi, &canvas)?,
        report: fused.report,
        failures,
    })
}

/// What happened to one slice.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceDiagnostics {
    pub roi: Option<RoiBox>,
    pub phase2_selected: Vec<String>,
    pub phase3_raters_per_pixel: usize,
    pub failures: Vec<AtlasFailure>,
    /// Set when the slice fell back to background.
    pub error: Option<String>,
}

/// Wall-clock per phase, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceTiming {
    pub phase1_ms: f64,
    pub phase2_ms: f64,
    pub phase3_ms: f64,
}

#[derive(Clone, Debug)]
pub struct SliceOutcome {
    pub labels: LabelMap,
    pub localization: Option<Localization>,
    pub rough: Option<LabelMap>,
    pub diagnostics: SliceDiagnostics,
    pub timing: SliceTiming,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs Phases I to III; any error degrades the slice to background.
pub fn segment_slice(
    target: &ImageGrid,
    atlases: &AtlasSet,
    config: &PipelineConfig,
) -> SliceOutcome {
    let mut diag = SliceDiagnostics::default();
    let mut timing = SliceTiming::default();
    let mut localization = None;
    let mut rough = None;
    let mut run = || -> Result<LabelMap> {
        let t0 = Instant::now();
        let loc = phase1_localize(target, atlases, config)?;
        timing.phase1_ms = ms(t0);
        diag.roi = Some(loc.roi);
        diag.failures.extend(loc.failures.iter().cloned());
        let t1 = Instant::now();
        let p2 = phase2_rough(target, &loc, atlases, config);
        localization = Some(loc);
        let p2 = p2?;
        timing.phase2_ms = ms(t1);
        diag.phase2_selected = p2.report.selected.clone();
        diag.failures.extend(p2.failures);
        let t2 = Instant::now();
        let p3 = phase3_refine(target, &p2.labels, atlases, config);
        rough = Some(p2.labels);
        let p3 = p3?;
        timing.phase3_ms = ms(t2);
        diag.phase3_raters_per_pixel = p3.report.raters_per_pixel;
        diag.failures.extend(p3.failures);
        Ok(p3.labels)
    };
    let labels = run().unwrap_or_else(|e| {
        log::warn!("slice degraded to background: {e}");
        diag.error = Some(e.to_string());
        LabelMap::filled(
            target.width(),
            target.height(),
            target.spacing(),
            BACKGROUND,
        )
        .expect("target dimensions are valid")
    });
    SliceOutcome {
        labels,
        localization,
        rough,
        diagnostics: diag,
        timing,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub phase: CardiacPhase,
    pub slice: usize,
    pub diagnostics: SliceDiagnostics,
}

/// Deterministic part of a case result; serialized as the case report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub slice_thickness: f64,
    pub volumes: Volumes,
    pub ef_available: bool,
    pub slices: Vec<SliceRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseTiming {
    pub total_ms: f64,
    pub slices: Vec<(CardiacPhase, usize, SliceTiming)>,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub labels: BTreeMap<CardiacPhase, Vec<LabelMap>>,
    /// Phase II output per slice, `None` where the slice failed earlier.
    pub rough: BTreeMap<CardiacPhase, Vec<Option<LabelMap>>>,
    pub report: CaseReport,
    /// Wall-clock figures; kept apart from the report so that stays
    /// reproducible.
    pub timing: CaseTiming,
}

/// Segments every slice with the phase-matched atlas set and derives the
/// clinical volumes.
pub fn segment_case(
    case: &LoadedCase,
    atlases_ed: Option<&AtlasSet>,
    atlases_es: Option<&AtlasSet>,
    config: &PipelineConfig,
) -> Result<CaseResult> {
    config.validate()?;
    if case.phases.values().all(|s| s.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "case {} has no slices",
            case.case_id
        )));
    }
    let mut jobs = Vec::new();
    for (&phase, slices) in &case.phases {
        let set = match phase {
            CardiacPhase::ED => atlases_ed,
            CardiacPhase::ES => atlases_es,
        }
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no {} atlases for case {}",
                phase.name(),
                case.case_id
            ))
        })?;
        if set.phase != phase {
            return Err(Error::InvalidArgument(format!(
                "{} slices given {} atlases",
                phase.name(),
                set.phase.name()
            )));
        }
        for (k, s) in slices.iter().enumerate() {
            jobs.push((phase, k, &s.image, set));
        }
    }
    let start = Instant::now();
    let outcomes = par::map_slice(&jobs, |&(_, _, image, set)| {
        segment_slice(image, set, config)
    });

    let mut labels: BTreeMap<CardiacPhase, Vec<LabelMap>> = BTreeMap::new();
    let mut rough: BTreeMap<CardiacPhase, Vec<Option<LabelMap>>> = BTreeMap::new();
    let mut records = Vec::new();
    let mut timing = CaseTiming::default();
    for (&(phase, k, _, _), out) in jobs.iter().zip(outcomes) {
        labels.entry(phase).or_default().push(out.labels);
        rough.entry(phase).or_default().push(out.rough);
        records.push(SliceRecord {
            phase,
            slice: k,
            diagnostics: out.diagnostics,
        });
        timing.slices.push((phase, k, out.timing));
    }
    timing.total_ms = ms(start);
    let volumes = Volumes::from_stacks(
        labels.get(&CardiacPhase::ED).map(Vec::as_slice),
        labels.get(&CardiacPhase::ES).map(Vec::as_slice),
        case.slice_thickness,
        MYOCARDIAL_DENSITY,
    )?;
    let report = CaseReport {
        case_id: case.case_id.clone(),
        slice_thickness: case.slice_thickness,
        ef_available: volumes.ef.is_some(),
        volumes,
        slices: records,
    };
    Ok(CaseResult {
        labels,
        rough,
        report,
        timing,
    })
}
